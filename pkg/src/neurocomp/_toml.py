import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def load_toml_text(text: str) -> dict:
    return tomllib.loads(text)


def load_toml_file(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)
