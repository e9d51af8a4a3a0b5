import json
import time

import pytest

from cqforge.config import load_config
from cqforge.emit import MCQARecord, read_jsonl
from cqforge.pipeline import (
    CONFIG_FILE,
    GENERATIVE_FILE,
    INSTANCES_FILE,
    MCQA_FILE,
    REPORT_FILE,
    StageError,
    run_pipeline,
    verify_output,
)
from cqforge.queries import QueryKind

from conftest import DATA, GOLDEN_CONFIG, GOLDEN_GRAPH

GOLDEN_RUN = DATA / "golden_run"
DATASET_FILES = ("graph.tsv", INSTANCES_FILE, MCQA_FILE, GENERATIVE_FILE)


def golden_cfg(out, **overrides):
    return load_config(GOLDEN_CONFIG, env={}, overrides={"input": str(GOLDEN_GRAPH), "output": str(out), **overrides})


def read_bytes(d, names=DATASET_FILES + (REPORT_FILE,)):
    return {n: (d / n).read_bytes() for n in names}


def test_golden_run_matches_frozen_output(tmp_path):
    t0 = time.perf_counter()
    rep = run_pipeline(golden_cfg(tmp_path))
    assert time.perf_counter() - t0 < 5
    assert rep.status == "success" and rep.exit_code == 0
    assert read_bytes(tmp_path) == read_bytes(GOLDEN_RUN)


@pytest.mark.parametrize("workers", [1, 4, 8])
def test_golden_run_identical_across_workers(tmp_path, workers):
    a, b = tmp_path / "a", tmp_path / "b"
    run_pipeline(golden_cfg(a, workers=workers))
    run_pipeline(golden_cfg(b, workers=workers))
    assert read_bytes(a) == read_bytes(b) == read_bytes(GOLDEN_RUN)
    assert (a / CONFIG_FILE).read_bytes() == (b / CONFIG_FILE).read_bytes()


def test_golden_run_covers_every_kind(tmp_path):
    run_pipeline(golden_cfg(tmp_path))
    kinds = {r["kind"] for r in read_jsonl(tmp_path / MCQA_FILE)}
    assert kinds == {k.value for k in QueryKind}


def test_golden_output_verifies(tmp_path):
    run_pipeline(golden_cfg(tmp_path))
    rep = verify_output(tmp_path)
    assert rep.ok, rep.failures
    assert rep.checked == {"instances": 15, "mcqa": 15, "generative": 15}


def test_verify_catches_tampering(tmp_path):
    run_pipeline(golden_cfg(tmp_path))
    lines = (tmp_path / MCQA_FILE).read_text().splitlines()
    rec = MCQARecord.from_json(lines[0])
    rec.label = (rec.label + 1) % 4
    lines[0] = rec.to_json()
    (tmp_path / MCQA_FILE).write_text("\n".join(lines) + "\n")
    rep = verify_output(tmp_path)
    assert not rep.ok
    assert any("gold" in f for f in rep.failures)


def test_verify_catches_answer_distractor(tmp_path):
    run_pipeline(golden_cfg(tmp_path))
    lines = (tmp_path / MCQA_FILE).read_text().splitlines()
    rec = MCQARecord.from_json(lines[0])
    rec.provenance["candidate_distractors"][0] = rec.provenance["answers"][0]
    lines[0] = rec.to_json()
    (tmp_path / MCQA_FILE).write_text("\n".join(lines) + "\n")
    assert any("is an answer" in f for f in verify_output(tmp_path).failures)


def test_empty_mix(tmp_path):
    rep = run_pipeline(golden_cfg(tmp_path, **{"sample.mix": ""}))
    assert rep.status == "success"
    for name in (INSTANCES_FILE, MCQA_FILE, GENERATIVE_FILE):
        assert (tmp_path / name).read_text() == ""
    report = json.loads((tmp_path / REPORT_FILE).read_text())
    assert report["files"][MCQA_FILE] == 0
    assert verify_output(tmp_path).ok


def test_disabled_stages_equal_identity_settings(tmp_path):
    off = golden_cfg(tmp_path / "off", **{"merge.enabled": False, "plausibility.enabled": False})
    ident = golden_cfg(
        tmp_path / "id", **{"merge.rules": False, "merge.tau": 1.0, "plausibility.threshold": 0.0}
    )
    run_pipeline(off)
    run_pipeline(ident)
    assert read_bytes(tmp_path / "off", DATASET_FILES) == read_bytes(tmp_path / "id", DATASET_FILES)


def test_shortfall_is_partial(tmp_path):
    rep = run_pipeline(golden_cfg(tmp_path, **{"sample.mix": "2i-neg=5"}))
    assert rep.status == "partial" and rep.exit_code == 1
    assert rep.stats["sample"]["sampled"]["2i-neg"] < 5


def test_report_contents(tmp_path):
    rep = run_pipeline(golden_cfg(tmp_path))
    s = rep.stats
    assert s["graph_loaded"]["num_nodes"] == 13
    assert s["normalize"]["nodes_after"] == 12
    assert s["filter"]["triples_removed"] == 1
    assert s["merge"]["merged_count"] == 0
    assert set(s["sample"]["answer_stats"]) == {k.value for k in QueryKind}
    assert s["curation"] == {"enabled": True, "k": 20, "before": 15, "after": 15}


def test_missing_input_is_stage_error(tmp_path):
    cfg = golden_cfg(tmp_path, input=str(tmp_path / "nope.tsv"))
    with pytest.raises(StageError) as info:
        run_pipeline(cfg)
    assert info.value.stage == "load"


class EchoClient:
    """Tags the anchors it was sent; answers NA for negated pairs."""

    def __init__(self):
        self.requests = []

    def generate(self, request):
        self.requests.append(request)
        if request["kind"] == "2i-neg":
            return "NA"
        e1, e2 = request["anchors"]
        return f"Earlier, <E1>{e1}</E1>. Later <E2>{e2}</E2>."


def test_llm_mode_with_fallback(tmp_path):
    client = EchoClient()
    cfg = golden_cfg(tmp_path, **{"verbalize.mode": "llm-with-rule-fallback", "verbalize.endpoint": "http://unused"})
    rep = run_pipeline(cfg, client=client)
    llm = rep.stats["llm"]
    # 3 x 2i, 1 x ip, 2 x pi accepted; the single 2i-neg falls back to the rule
    assert llm == {"requested": 7, "accepted": 6, "rejected": 0, "fallback": 1}
    recs = read_jsonl(tmp_path / MCQA_FILE)
    sources = {r["kind"]: r["metadata"]["context_source"] for r in recs}
    assert sources["2i"] == "llm" and sources["2i-neg"] == "rule-fallback" and sources["1p"] == "rule"
    for r in recs:
        if r["metadata"]["context_source"] == "llm":
            assert r["context"].startswith("Earlier, ") and "<E" not in r["context"]
    assert verify_output(tmp_path).ok


def test_llm_strict_mode_drops_na(tmp_path):
    cfg = golden_cfg(tmp_path, **{"verbalize.mode": "llm", "verbalize.endpoint": "http://unused"})
    rep = run_pipeline(cfg, client=EchoClient())
    assert rep.status == "partial"
    assert rep.stats["dropped"] == {"llm": 1}
    assert "2i-neg" not in {r["kind"] for r in read_jsonl(tmp_path / MCQA_FILE)}


def test_llm_transport_failure_in_strict_mode(tmp_path):
    from cqforge._http import TransportError

    class Down:
        def generate(self, request):
            raise TransportError("connection refused")

    cfg = golden_cfg(tmp_path, **{"verbalize.mode": "llm", "verbalize.endpoint": "http://unused"})
    with pytest.raises(StageError) as info:
        run_pipeline(cfg, client=Down())
    assert info.value.stage == "verbalize-llm"
