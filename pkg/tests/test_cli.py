"""CLI tests: the full gen-corpus → train → embed → eval → report flow on a
tiny corpus, plus manifests, determinism, and exit codes."""

import json

import numpy as np
import pytest

from cxalign.cli import main


TINY_CONFIG = {
    "layers": 1,
    "model_dim": 32,
    "heads": 2,
    "ffn_dim": 64,
    "shared_dim": 32,
    "lora_rank": 4,
    "batch_mntp": 8,
    "batch_contrastive": 8,
    "batch_clip": 8,
    "epochs_clip": 1,
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One tiny end-to-end run shared by the read-only assertions below."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus.jsonl"
    assert main(["gen-corpus", "--n", "50", "--seed", "7", "--out", str(corpus)]) == 0

    from cxalign.pipeline import RunConfig

    cfg = root / "config.json"
    cfg.write_text(RunConfig(**TINY_CONFIG).to_json())

    common = ["--corpus", str(corpus), "--config", str(cfg)]
    assert main(["train", "mntp", *common, "--out", str(root / "s1")]) == 0
    assert main(["train", "contrastive", *common, "--init", str(root / "s1"), "--out", str(root / "s2")]) == 0
    assert main(["train", "clip", *common, "--init", str(root / "s2"), "--out", str(root / "s3")]) == 0
    return root


def test_gen_corpus_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    main(["gen-corpus", "--n", "20", "--seed", "3", "--out", str(a)])
    main(["gen-corpus", "--n", "20", "--seed", "3", "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.jsonl"
    main(["gen-corpus", "--n", "20", "--seed", "4", "--out", str(c)])
    assert a.read_bytes() != c.read_bytes()


def test_gen_corpus_writes_manifest(tmp_path):
    out = tmp_path / "x.jsonl"
    main(["gen-corpus", "--n", "5", "--seed", "1", "--out", str(out)])
    manifest = json.loads((tmp_path / "x.jsonl.manifest.json").read_text())
    assert manifest["command"] == "gen-corpus"
    assert manifest["seed"] == 1
    assert "numpy" in manifest["versions"] and "cxalign" in manifest["versions"]


def test_missing_required_args_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen-corpus", "--n", "5"])  # --out missing
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_train_clip_without_init_fails(workdir, capsys):
    rc = main([
        "train", "clip",
        "--corpus", str(workdir / "corpus.jsonl"),
        "--config", str(workdir / "config.json"),
        "--out", str(workdir / "nope"),
    ])
    assert rc == 2
    assert "--init" in capsys.readouterr().err


def test_train_outputs_run_directory(workdir):
    for stage_dir in ("s1", "s2", "s3"):
        d = workdir / stage_dir
        assert (d / "model.cxal").exists()
        assert (d / "config.json").exists()
        assert (d / "vocab.txt").exists()
        assert (d / "manifest.json").exists()
        log = [json.loads(line) for line in (d / "log.jsonl").read_text().splitlines()]
        assert any("loss" in r for r in log)


def test_embed_writes_npz(workdir, tmp_path):
    out = tmp_path / "emb.npz"
    rc = main([
        "embed", "--ckpt", str(workdir / "s2"),
        "--corpus", str(workdir / "corpus.jsonl"),
        "--out", str(out),
    ])
    assert rc == 0
    data = np.load(out, allow_pickle=False)
    assert data["matrix"].shape[0] == len(data["ids"]) == 50
    assert np.allclose(np.linalg.norm(data["matrix"], axis=1), 1.0, atol=1e-4)


def test_embed_image_requires_clip_stage(workdir, tmp_path, capsys):
    rc = main([
        "embed", "--ckpt", str(workdir / "s2"),
        "--corpus", str(workdir / "corpus.jsonl"),
        "--side", "image",
        "--out", str(tmp_path / "e.npz"),
    ])
    assert rc == 2
    rc = main([
        "embed", "--ckpt", str(workdir / "s3"),
        "--corpus", str(workdir / "corpus.jsonl"),
        "--side", "image",
        "--out", str(tmp_path / "img.npz"),
    ])
    assert rc == 0
    data = np.load(tmp_path / "img.npz", allow_pickle=False)
    assert data["matrix"].shape[0] == 50


def test_eval_writes_report_and_requirements_gate(workdir, tmp_path):
    out = tmp_path / "t1.json"
    base = [
        "eval", "--task", "task1",
        "--ckpt", str(workdir / "s2"),
        "--corpus", str(workdir / "corpus.jsonl"),
        "--out", str(out),
    ]
    assert main([*base, "--require", "recall@1>=0.0"]) == 0
    doc = json.loads(out.read_text())
    assert "task1" in doc["tasks"] and "recall@1" in doc["tasks"]["task1"]
    # An unattainable requirement must flip the exit code.
    assert main([*base, "--require", "recall@1>=1.01"]) == 1
    assert main([*base, "--require", "no_such_metric>=0.0"]) == 1


def test_eval_judge_reports_mean_rank(workdir, tmp_path):
    out = tmp_path / "judge.json"
    rc = main([
        "eval", "--task", "judge",
        "--ckpt", str(workdir / "s2"),
        "--corpus", str(workdir / "corpus.jsonl"),
        "--out", str(out),
    ])
    assert rc == 0
    metrics = json.loads(out.read_text())["tasks"]["judge"]
    assert metrics["mean_rank_truth"] >= 1.0
    assert metrics["flagged"] == 0


def test_report_merges_tables(workdir, tmp_path, capsys):
    outs = []
    for task in ("task1", "task3"):
        out = tmp_path / f"{task}.json"
        main([
            "eval", "--task", task,
            "--ckpt", str(workdir / "s2"),
            "--corpus", str(workdir / "corpus.jsonl"),
            "--out", str(out),
        ])
        outs.append(str(out))
    capsys.readouterr()
    merged = tmp_path / "report.txt"
    assert main(["report", *outs, "--out", str(merged)]) == 0
    table = merged.read_text()
    assert "task1" in table and "task3" in table
    assert table.splitlines()[0].split()[0] == "task"
