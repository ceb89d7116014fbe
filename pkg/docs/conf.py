#!/usr/bin/env python
#
# Sphinx configuration for the v2ir documentation.

import os
import sys

sys.path.insert(0, os.path.abspath(os.path.join("..", "src")))

import v2ir  # noqa: E402

# -- General configuration ---------------------------------------------

extensions = ["sphinx.ext.autodoc", "sphinx.ext.viewcode"]
templates_path = ["_templates"]
source_suffix = ".rst"
master_doc = "index"

project = "v2ir"
copyright = "2026, v2ir developers"
author = "v2ir developers"

version = v2ir.__version__
release = v2ir.__version__

language = "en"
exclude_patterns = ["_build", "Thumbs.db", ".DS_Store"]
pygments_style = "sphinx"
todo_include_todos = False

# -- HTML output -------------------------------------------------------

html_theme = "alabaster"
html_static_path = ["_static"]
htmlhelp_basename = "v2irdoc"

# -- Other builders ----------------------------------------------------

latex_documents = [
    (master_doc, "v2ir.tex", "v2ir Documentation", author, "manual"),
]

man_pages = [(master_doc, "v2ir", "v2ir Documentation", [author], 1)]

texinfo_documents = [
    (
        master_doc,
        "v2ir",
        "v2ir Documentation",
        author,
        "v2ir",
        "Visible-to-infrared image translation with GANs.",
        "Miscellaneous",
    ),
]
