#!/usr/bin/env python3
"""Smoke test for the aghmn_py extension module.

Builds the extension with cargo, loads it, and exercises the public
surface: gradient check, corpus generation, training, evaluation,
prediction, and checkpoint round-trip.

Usage: python3 python/smoke_test.py
"""

import json
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def build_extension(workdir: Path) -> None:
    subprocess.run(
        ["cargo", "build", "-p", "aghmn-py"],
        cwd=REPO,
        check=True,
    )
    built = REPO / "target" / "debug" / "libaghmn_py.so"
    if not built.exists():  # e.g. macOS
        built = REPO / "target" / "debug" / "libaghmn_py.dylib"
    shutil.copy(built, workdir / "aghmn_py.so")


def main() -> int:
    workdir = Path(tempfile.mkdtemp(prefix="aghmn_smoke_"))
    build_extension(workdir)
    sys.path.insert(0, str(workdir))
    import aghmn_py

    # 1. Gradient check on two variants.
    for reader, fusion, summarizer in [("bigru", "unif", "agru"), ("cnn", "bif", "biagru")]:
        err = aghmn_py.grad_check(reader=reader, fusion=fusion, summarizer=summarizer)
        print(f"grad check {reader}/{fusion}-{summarizer}: worst rel err {err:.3e}")
        assert err < 1e-4, f"gradient check failed at {err}"

    # 2. Generate a small contextual corpus.
    corpus = workdir / "corpus.jsonl"
    summary = aghmn_py.generate_corpus(str(corpus), n=80, classes=3, carry=0.3, seed=11)
    print(f"corpus: {summary['n_conversations']} conversations, "
          f"{summary['n_utterances']} utterances, {summary['carried_count']} carried")
    labels = summary["labels"]
    assert corpus.exists()
    first = json.loads(corpus.read_text().splitlines()[0])
    assert set(first) == {"conv_id", "turn", "speaker", "text", "label"}

    # 3. Train a small model and evaluate it.
    model = aghmn_py.Model.train(
        str(corpus), labels, d_w=12, d1=16, k=4, max_epochs=15, seed=11,
    )
    report = model.evaluate(str(corpus))
    print(f"train-set accuracy {report['accuracy']:.3f}, macro-F1 {report['macro_f1']:.3f}")
    assert report["accuracy"] > 0.5, "model failed to learn the keyword task at all"

    # 4. Predict on a raw conversation; check the trace invariants.
    conversation = [
        ("A", "well that was keno really"),
        ("B", "so kuno maybe"),
        ("A", "right okay just fine"),
    ]
    traces = model.predict(conversation)
    assert len(traces) == 3
    assert traces[0]["weights"] == []
    for trace in traces[1:]:
        assert abs(sum(trace["weights"]) - 1.0) <= 1e-6
    for trace in traces:
        assert abs(sum(trace["probs"]) - 1.0) <= 1e-9
        assert trace["pred"] in labels
    print(f"predictions: {[t['pred'] for t in traces]}")

    # 5. Checkpoint round-trip preserves behaviour exactly.
    checkpoint = workdir / "model.json"
    model.save(str(checkpoint))
    reloaded = aghmn_py.Model.load(str(checkpoint))
    assert reloaded.labels == labels
    report2 = reloaded.evaluate(str(corpus))
    assert report2 == report
    assert [t["probs"] for t in reloaded.predict(conversation)] == [t["probs"] for t in traces]

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
