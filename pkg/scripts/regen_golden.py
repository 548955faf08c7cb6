#!/usr/bin/env python3
"""Regenerate the rendered-prompt golden files from the frozen templates.

Substitution here is a deliberately naive str.replace, independent of the
package's placeholder machinery, so the golden files act as an oracle for
it. Run only when a template or the fixture bindings change on purpose;
the test suite treats the outputs as frozen.
"""

import json
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
GOLDEN = ROOT / "tests" / "golden"


def main() -> None:
    bindings = json.loads((GOLDEN / "fixture_bindings.json").read_text(encoding="utf-8"))
    out_dir = GOLDEN / "rendered"
    out_dir.mkdir(exist_ok=True)
    for template_id, values in bindings.items():
        body = (GOLDEN / "templates" / f"{template_id}.txt").read_text(encoding="utf-8")
        for name, value in values.items():
            body = body.replace("{" + name + "}", value)
        (out_dir / f"{template_id}.txt").write_text(body, encoding="utf-8")
        print(f"wrote rendered/{template_id}.txt")


if __name__ == "__main__":
    main()
