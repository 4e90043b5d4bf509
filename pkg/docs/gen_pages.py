"""
Generate the API reference pages, their navigation and the index page.
"""

from pathlib import Path

import mkdocs_gen_files

project_dir = Path(__file__).resolve().parent.parent
package_dir = project_dir / "proofpipe"
skip_marker = "\n<!--skip-->\n"

nav = mkdocs_gen_files.Nav()

for path in sorted(package_dir.glob("*.py")):
    if path.stem in {"__main__", "__about__"}:
        continue
    module = "proofpipe" if path.stem == "__init__" else f"proofpipe.{path.stem}"
    page = Path("reference", "index.md" if path.stem == "__init__" else f"{path.stem}.md")
    nav[tuple(module.split("."))] = page.relative_to("reference").as_posix()
    with mkdocs_gen_files.open(page, "w") as fd:
        fd.write(f"# `{module}`\n\n::: {module}\n")
    mkdocs_gen_files.set_edit_path(page, path.relative_to(project_dir))

with mkdocs_gen_files.open("reference/SUMMARY.md", "w") as nav_file:
    nav_file.writelines(nav.build_literate_nav())

readme = (project_dir / "README.md").read_text(encoding="utf-8")
readme = readme.replace("](docs/", "](")
# drop every block fenced by a pair of skip markers
readme = "\n".join(readme.split(skip_marker)[::2])
with mkdocs_gen_files.open("index.md", "w") as index_file:
    index_file.write(readme)
