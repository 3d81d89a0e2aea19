# Sphinx configuration for the disp documentation.

import sys
import tomllib
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))

with open(ROOT / "pyproject.toml", "rb") as f:
    metadata = tomllib.load(f)["project"]

project = metadata["name"]
release = metadata["version"]
version = ".".join(release.split(".")[:2])
author = metadata["authors"][0]["name"]
copyright = f"2026, {author}"

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.intersphinx",
    "sphinx.ext.mathjax",
    "sphinx.ext.napoleon",
    "myst_parser",
]
myst_enable_extensions = ["amsmath", "dollarmath"]

# API pages build without the training stack installed.
autodoc_mock_imports = ["torch", "tqdm"]
autodoc_member_order = "bysource"
autodoc_typehints = "description"
napoleon_google_docstring = True

intersphinx_mapping = {
    "python": ("https://docs.python.org/3", None),
    "numpy": ("https://numpy.org/doc/stable", None),
    "pandas": ("https://pandas.pydata.org/docs", None),
}

html_theme = "furo"
html_title = f"disp {release}"
exclude_patterns = ["_build"]
