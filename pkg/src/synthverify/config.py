"""TOML configuration loading."""

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


def read_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def parse_toml(text: str) -> dict:
    return tomllib.loads(text)
