"""Rebuild the frozen golden run used by the test suite.

Only needed after an intentional output change. The run is verified before
anything is copied over the frozen files.
"""

import shutil
import sys
import tempfile
from pathlib import Path

from cqforge.config import load_config
from cqforge.pipeline import run_pipeline, verify_output

DATA = Path(__file__).resolve().parent.parent / "tests" / "data"
FROZEN = ("graph.tsv", "instances.jsonl", "mcqa.jsonl", "generative.jsonl", "report.json")


def main() -> int:
    with tempfile.TemporaryDirectory() as tmp:
        cfg = load_config(DATA / "golden_config.yaml", env={},
                          overrides={"input": str(DATA / "golden_graph.tsv"), "output": tmp})
        report = run_pipeline(cfg)
        check = verify_output(tmp)
        if report.status != "success" or not check.ok:
            print(f"not freezing: status={report.status}, failures={check.failures}", file=sys.stderr)
            return 1
        dest = DATA / "golden_run"
        dest.mkdir(exist_ok=True)
        for name in FROZEN:
            shutil.copyfile(Path(tmp) / name, dest / name)
    print(f"froze {len(FROZEN)} files into {dest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
