import json
import struct
import subprocess
import sys

import numpy as np
import pytest

from mergeforge.cli import main
from mergeforge.merge_ops import task_arithmetic_merge, task_vectors
from mergeforge.tensor_store import DType, Tensor, WeightMap, load_weights, store_weights


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def two_tensor_file(tmp_path):
    w = WeightMap(
        {
            "a.weight": Tensor(np.ones((2, 3), np.float32), DType.BF16),
            "b.bias": Tensor(np.zeros(4, np.float32), DType.F32),
        }
    )
    store_weights(w, tmp_path / "m.safetensors")
    return tmp_path / "m.safetensors"


def test_inspect_table(capsys, two_tensor_file):
    code, out, err = run(capsys, "inspect", two_tensor_file)
    assert code == 0 and err == ""
    lines = out.splitlines()
    assert len(lines) == 4
    assert lines[1].split() == ["a.weight", "BF16", "2x3", "12"]
    assert lines[2].split() == ["b.bias", "F32", "4", "16"]
    assert lines[3] == "total: 2 tensors, 10 parameters, 28 bytes"


def test_inspect_json(capsys, two_tensor_file):
    code, out, _ = run(capsys, "inspect", two_tensor_file, "--json")
    doc = json.loads(out)
    assert code == 0
    assert doc["tensors"][0] == {"name": "a.weight", "dtype": "BF16", "shape": [2, 3], "data_offsets": [0, 12]}
    assert doc["totals"] == {"tensors": 2, "parameters": 10, "bytes": 28}


def test_inspect_corrupt(capsys, tmp_path):
    p = tmp_path / "bad.safetensors"
    p.write_bytes(struct.pack("<Q", 1000) + b"{}")
    code, out, err = run(capsys, "inspect", p)
    assert code == 1 and out == "" and "exceeds" in err


def _recipe(tmp_path, base, experts, method, params, **extra):
    doc = {
        "base": str(base),
        "experts": [{"path": str(p), "weight": w} for p, w in experts],
        "method": method,
        "params": params,
        **extra,
    }
    path = tmp_path / f"{method}.json"
    path.write_text(json.dumps(doc))
    return path


def test_merge_and_metadata(capsys, tmp_path, tiny_checkpoints):
    base, (e0, e1) = tiny_checkpoints
    recipe = _recipe(tmp_path, base, [(e0, 0.5), (e1, 0.7)], "task_arithmetic", {"lambda": 1.1})
    out = tmp_path / "out.safetensors"
    code, stdout, err = run(capsys, "--threads", 2, "merge", "--recipe", recipe, "--out", out)
    assert code == 0 and stdout == ""
    merged = load_weights(out)
    b = load_weights(base)
    tv = task_vectors(b, [load_weights(e0), load_weights(e1)])
    assert merged.equal(task_arithmetic_merge(b, tv, [0.5, 0.7], 1.1))
    assert merged.metadata == {"merge_method": "task_arithmetic", "merge_seed": "0"}


def test_merge_dry_run(capsys, tmp_path, tiny_checkpoints):
    base, (e0, _) = tiny_checkpoints
    recipe = _recipe(tmp_path, base, [(e0, 1.0)], "slerp", {"t": 0.25})
    code, out, _ = run(capsys, "merge", "--recipe", recipe, "--dry-run", "--seed", 9)
    plan = json.loads(out)
    assert code == 0 and plan["seed"] == 9 and plan["tensors"] == 4 and plan["method"] == "slerp"
    assert not list(tmp_path.glob("*.partial"))


def test_merge_errors(capsys, tmp_path, tiny_checkpoints):
    base, (e0, _) = tiny_checkpoints
    recipe = _recipe(tmp_path, base, [(e0, 1.0)], "ties", {"density": 0})
    code, _, err = run(capsys, "merge", "--recipe", recipe, "--out", tmp_path / "o")
    assert code == 1 and "method_params.density" in err
    recipe = _recipe(tmp_path, base, [(e0, 1.0)], "ties", {"density": 0.5})
    code, _, err = run(capsys, "merge", "--recipe", recipe)
    assert code == 1 and "--out" in err


def test_merge_allow_missing(capsys, caplog, tmp_path, tiny_checkpoints):
    base, _ = tiny_checkpoints
    b = load_weights(base)
    partial = WeightMap({n: b[n] for n in list(b)[:2]})
    store_weights(partial, tmp_path / "partial.safetensors")
    recipe = _recipe(tmp_path, base, [(tmp_path / "partial.safetensors", 1.0)], "task_arithmetic", {})
    code, _, err = run(capsys, "merge", "--recipe", recipe, "--out", tmp_path / "o.safetensors")
    assert code == 1 and "missing" in err
    code, _, err = run(capsys, "merge", "--recipe", recipe, "--out", tmp_path / "o.safetensors", "--allow-missing")
    assert code == 0 and "missing" in caplog.text
    assert load_weights(tmp_path / "o.safetensors").equal(b)


def test_merge_seed_reproducible(capsys, tmp_path, tiny_checkpoints):
    base, (e0, e1) = tiny_checkpoints
    recipe = _recipe(
        tmp_path, base, [(e0, 1.0), (e1, 1.0)], "ties", {"density": 0.5, "dare": {"drop_p": 0.5}}
    )
    outs = []
    for name, seed in (("a", 3), ("b", 3), ("c", 4)):
        path = tmp_path / f"{name}.safetensors"
        assert run(capsys, "merge", "--recipe", recipe, "--out", path, "--seed", seed)[0] == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1] != outs[2]


def _toy_evolve_files(tmp_path):
    rng = np.random.default_rng(0)
    ws = [WeightMap({"w": rng.standard_normal(16).astype(np.float32)}) for _ in range(3)]
    for name, w in zip(("base", "e0", "e1"), ws):
        store_weights(w, tmp_path / f"{name}.safetensors")
    target = task_arithmetic_merge(ws[0], task_vectors(ws[0], ws[1:]), [0.3, 1.2])
    store_weights(target, tmp_path / "target.safetensors")
    doc = {
        "base": "base.safetensors",
        "experts": [{"path": "e0.safetensors"}, {"path": "e1.safetensors"}],
        "method": "task_arithmetic",
    }
    (tmp_path / "template.json").write_text(json.dumps(doc))


def test_evolve_synthetic(capsys, tmp_path):
    _toy_evolve_files(tmp_path)
    args = [
        "evolve", "--template", tmp_path / "template.json", "--synthetic-target", tmp_path / "target.safetensors",
        "--budget", 200, "--population", 10, "--seed", 1, "--genes", "weight_0,weight_1",
        "--state", tmp_path / "state.json", "--out", tmp_path / "best.json", "--history", tmp_path / "hist.json",
    ]
    code, out, _ = run(capsys, *args)
    assert code == 0
    doc = json.loads(out)
    assert doc["seed"] == 1 and doc["evaluations"] == 200
    w = [e["weight"] for e in doc["best_recipe"]["experts"]]
    assert np.max(np.abs(np.array(w) - [0.3, 1.2])) < 0.1
    assert json.loads((tmp_path / "best.json").read_text())["method"] == "task_arithmetic"
    assert len(json.loads((tmp_path / "hist.json").read_text())) == 200
    # same seed: byte-identical machine output
    code, again, _ = run(capsys, *args)
    assert again == out


def test_evolve_requires_one_evaluator(capsys, tmp_path):
    _toy_evolve_files(tmp_path)
    with pytest.raises(SystemExit):
        main(["evolve", "--template", str(tmp_path / "template.json")])
    with pytest.raises(SystemExit):
        main(["evolve", "--template", str(tmp_path / "template.json"), "--evaluator", "x {model}",
              "--synthetic-target", "t"])
    capsys.readouterr()
    code, _, err = run(capsys, "evolve", "--template", tmp_path / "template.json", "--synthetic-target",
                       tmp_path / "target.safetensors", "--resume")
    assert code == 1 and "--state" in err


def test_stats_default_fixture(capsys):
    code, out, _ = run(capsys, "stats", "--baseline", "Phi-3.5-mini-instruct", "--candidates", "MediPhi,MediPhi-SFT")
    assert code == 0
    lines = out.splitlines()
    assert lines[3].split() == ["MediPhi", "39.3", "(+2.8)", "11", "1.5"]
    assert lines[4].split() == ["MediPhi-SFT", "43.0", "(+6.4)", "9", "1.4"]


def test_stats_formats(capsys, tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"models": {"b": {"x": 10, "y": 20}, "c": {"x": 12, "y": 24}}}))
    code, out, _ = run(capsys, "stats", "--scores", p, "--baseline", "b", "--format", "json")
    assert code == 0 and json.loads(out)[0]["num_dataset_gains"] == 2
    code, out, _ = run(capsys, "stats", "--scores", p, "--baseline", "b", "--format", "csv")
    assert out.splitlines()[1] == "c,b,18.0,+3.0,2,0.5"
    code, out, err = run(capsys, "stats", "--scores", p, "--baseline", "zzz")
    assert code == 1 and out == "" and "zzz" in err


def test_pack_plain_and_pit(capsys, tmp_path):
    inp = tmp_path / "in.jsonl"
    inp.write_text("\n".join(json.dumps({"id": f"s{i}", "tokens": list(range(1, n + 1))}) for i, n in
                             enumerate([2000, 2500, 1500, 4000])))
    code, out, _ = run(capsys, "pack", "--input", inp)
    assert code == 0
    blocks = [json.loads(line) for line in out.splitlines()]
    assert [[s["len"] for s in b["segments"]] for b in blocks] == [[4000], [2500, 1500], [2000]]

    pit = tmp_path / "pit.jsonl"
    pit.write_text(
        "\n".join(
            json.dumps(r)
            for r in [
                {"id": "q1", "group": "g", "tokens": [5, 6]},
                {"id": "q2", "group": "g", "tokens": [7]},
                {"id": "doc", "group": "g", "role": "document", "tokens": [8, 9]},
            ]
        )
    )
    out_path = tmp_path / "blocks.jsonl"
    code, out, _ = run(capsys, "pack", "--input", pit, "--pit", "--eos", 0, "--phase", "task_plus_document",
                       "--capacity", 16, "--out", out_path)
    assert code == 0 and out == ""
    block = json.loads(out_path.read_text())
    assert block["tokens"] == [5, 6, 0, 7, 0, 8, 9]
    code, _, err = run(capsys, "pack", "--input", pit, "--pit")
    assert code == 1 and "--eos" in err


def test_module_entry_point(tmp_path, two_tensor_file):
    proc = subprocess.run(
        [sys.executable, "-m", "mergeforge", "inspect", str(two_tensor_file)], capture_output=True, text=True
    )
    assert proc.returncode == 0 and proc.stdout.startswith("name")
