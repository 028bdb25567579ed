# Sphinx configuration for the UMC package documentation.
#
# Build with ``sphinx-build -b html docs docs/_build`` from the repository root.

import os
import sys

sys.path.insert(0, os.path.abspath("../"))


# -- Project information -----------------------------------------------------

project = "UMC"
copyright = "2026, UMC developers"
author = "UMC developers"

# Keep in sync with ``umc.__version__``.
version = "1.0.0"
release = "1.0.0"


# -- General configuration ---------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.doctest",
    "sphinx.ext.viewcode",
    "sphinx.ext.intersphinx",
    "sphinx.ext.mathjax",
    "numpydoc",
]

source_suffix = ".rst"
master_doc = "index"
language = "en"
exclude_patterns = ["_build"]
pygments_style = "sphinx"

numpydoc_show_class_members = False


# -- Options for HTML output -------------------------------------------------

html_theme = "alabaster"


# -- Autodoc configuration ---------------------------------------------------

autodoc_default_options = {
    "members": True,
    "member-order": "bysource",
    "show-inheritance": True,
}


# -- Intersphinx configuration -----------------------------------------------

intersphinx_mapping = {
    "torch": ("https://pytorch.org/docs/stable/", None),
    "numpy": ("https://numpy.org/doc/stable/", None),
}
