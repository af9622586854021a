"""Generate the API reference pages automatically."""

from pathlib import Path
import ast

import mkdocs_gen_files

package_dir = Path("python/mgprnn")

nav = mkdocs_gen_files.Nav()

CATEGORY_ORDER = [
    "Classes",
    "Enums",
    "Functions",
    "Exceptions",
]

MODULE_ORDER = [
    "training",
    "mgp",
    "linalg",
    "autodiff",
    "rnn",
    "features",
    "data",
    "metrics",
    "synthetic",
    "checkpoint",
    "bench",
    "config",
    "cli",
    "exceptions",
]

CLASS_BOOSTS = {
    "Model": 10,
    "MgpHyperparams": 8,
    "TrainConfig": 8,
    "EncounterRecord": 8,
    "PosteriorGaussian": 6,
    "RunConfig": 6,
    "ScoredCohort": 5,
    "Tape": 5,
}


def parse_module(path: Path) -> dict:
    """
    Read a module's source and classify the names listed in its __all__.

    Returns dict mapping object names to their info:
        {name: {"type": "class"|"function"|"enum"|"exception", "category": str}}
    """
    tree = ast.parse(path.read_text(encoding="utf-8"))
    exported: list[str] = []
    definitions: dict[str, ast.AST] = {}
    for node in tree.body:
        if isinstance(node, (ast.ClassDef, ast.FunctionDef)):
            definitions[node.name] = node
        elif isinstance(node, ast.Assign) and any(
            isinstance(t, ast.Name) and t.id == "__all__" for t in node.targets
        ):
            exported = [elt.value for elt in node.value.elts if isinstance(elt, ast.Constant)]

    objects = {}
    for name in exported:
        node = definitions.get(name)
        # Re-exports and constants are documented where they are defined.
        if node is None:
            continue
        if isinstance(node, ast.FunctionDef):
            objects[name] = {"type": "function", "category": "Functions"}
            continue
        bases = " ".join(ast.unparse(base) for base in node.bases)
        if "Enum" in bases:
            objects[name] = {"type": "enum", "category": "Enums"}
        elif "Error" in bases or "Exception" in bases:
            objects[name] = {"type": "exception", "category": "Exceptions"}
        else:
            objects[name] = {"type": "class", "category": "Classes"}
    return objects


def category_sort_key(category: str) -> tuple:
    """Sort key for categories based on CATEGORY_ORDER."""
    try:
        return (0, CATEGORY_ORDER.index(category))
    except ValueError:
        return (1, category)


def module_sort_key(module: str) -> tuple:
    try:
        return (0, MODULE_ORDER.index(module))
    except ValueError:
        return (1, module)


def get_type_label(info: dict) -> str:
    """Get the display label for an object's type."""
    return {"enum": "Enum", "exception": "Exception", "class": "Class"}.get(info["type"], "Func")


modules = {
    path.stem: parse_module(path)
    for path in sorted(package_dir.glob("*.py"))
    if not path.stem.startswith("_")
}

# Generate index page
with mkdocs_gen_files.open(Path("reference", "index.md"), "w") as f:
    f.write((
        "# API Reference\n\n"
        "Complete reference for the `mgprnn` package, one section per module."
    ))

nav[("index",)] = "index.md"

for module in sorted(modules, key=module_sort_key):
    objects = modules[module]
    if not objects:
        continue
    by_category: dict[str, list[str]] = {}
    for name, info in objects.items():
        by_category.setdefault(info["category"], []).append(name)

    for category in sorted(by_category, key=category_sort_key):
        for name in sorted(by_category[category]):
            info = objects[name]
            doc_path = Path("reference", module, f"{name}.md")
            with mkdocs_gen_files.open(doc_path, "w") as f:
                if category == "Exceptions":
                    f.write("---\nsearch:\n  boost: 0.3\n---\n\n")
                elif name in CLASS_BOOSTS:
                    f.write(f"---\nsearch:\n  boost: {CLASS_BOOSTS[name]}\n---\n\n")
                f.write(f"# `{name}` ({get_type_label(info)})\n\n")
                f.write(f"::: mgprnn.{module}.{name}\n")
                f.write("    options:\n")
                f.write("      show_root_heading: false\n")
                f.write("      show_root_full_path: false\n")

            nav[(module, category, name)] = f"{module}/{name}.md"

# Generate the navigation file. literate-nav consumes it for the nav tree,
# but it is also rendered as a standalone page; exclude it from search.
with mkdocs_gen_files.open("reference/SUMMARY.md", "w") as nav_file:
    nav_file.write("---\nsearch:\n  exclude: true\n---\n\n")
    nav_file.writelines(nav.build_literate_nav())
