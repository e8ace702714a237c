import json
import subprocess
import sys

import numpy as np
import pytest

from kangaroo.cli import main
from kangaroo.model import Forest, evaluate_forest_fixed
from kangaroo.synth import random_forest, random_inputs


@pytest.fixture
def workspace(tmp_path):
    f = random_forest(3, 3, 4, 3)
    (tmp_path / "model.json").write_text(json.dumps(f.to_json()))
    x = random_inputs(5, f, 3)
    np.savetxt(tmp_path / "x.csv", x, delimiter=",", header="a,b,c,d")
    return tmp_path, f, x


def _pack_keys(tmp, backend="transparent"):
    common = ["--backend", backend, "--seed", "7"]
    assert main(["pack", str(tmp / "model.json"), "--out", str(tmp / "p"), *common]) == 0
    assert main(["keygen", "--bundle", str(tmp / "p/bundle.kpub"), "--out", str(tmp / "k"), *common]) == 0


@pytest.mark.parametrize("backend", ["transparent", "lattice"])
def test_pack_keygen_infer(workspace, capsys, backend):
    tmp, f, x = workspace
    _pack_keys(tmp, backend)
    capsys.readouterr()
    rc = main(["infer", "--bundle", str(tmp / "p/bundle.kpub"), "--keys", str(tmp / "k"), "--features",
               str(tmp / "x.csv"), "--model", str(tmp / "p/model.kpack"), "--backend", backend, "--net", "wan",
               "--transcript", str(tmp / "t.csv")])
    assert rc == 0
    out = capsys.readouterr().out
    raw = [int(line.split("raw=")[1]) for line in out.splitlines() if line.startswith("pi=")]
    spec = f.quantization(256)
    assert raw == [evaluate_forest_fixed(f.trees, spec.quantize_vector(r), spec) for r in x]
    assert "rounds/query=4.0" in out
    assert (tmp / "t.csv").read_text().startswith("seq,direction,type,bytes,t_send_ms,t_recv_ms")


def test_pack_deterministic(workspace):
    tmp, _, _ = workspace
    for d in ("a", "b"):
        main(["pack", str(tmp / "model.json"), "--out", str(tmp / d), "--seed", "3"])
    assert (tmp / "a/model.kpack").read_bytes() == (tmp / "b/model.kpack").read_bytes()


def test_convert(workspace, capsys):
    tmp, f, _ = workspace
    _pack_keys(tmp)
    capsys.readouterr()
    main(["convert", str(tmp / "p/bundle.kpub")])
    doc = json.loads(capsys.readouterr().out)
    assert doc["feature_count"] == 4 and len(doc["structures"]) == 3
    main(["convert", str(tmp / "p/model.kpack"), "--out", str(tmp / "m.json")])
    doc = json.loads((tmp / "m.json").read_text())
    assert len(doc["trees"]) == 3 and "layout" in doc["public"]
    main(["convert", str(tmp / "k/public.key")])
    assert json.loads(capsys.readouterr().out)["magic"] == "KGRPKEY"


def test_bench_verb(tmp_path, capsys):
    assert main(["bench", "--suite", "comparison-micro", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "bench.csv").exists() and "| comparison-micro" in (tmp_path / "bench.md").read_text()


def test_errors(tmp_path, capsys):
    assert main(["pack", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.json").write_text("{}")
    assert main(["pack", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["keygen", "--params", "nope"])


def test_serve_and_connect(workspace):
    tmp, f, x = workspace
    _pack_keys(tmp)
    srv = subprocess.Popen([sys.executable, "-m", "kangaroo", "serve", "--model", str(tmp / "p/model.kpack"),
                            "--backend", "transparent", "--port", "0", "--duration", "30"],
                           stdout=subprocess.PIPE, text=True)
    try:
        line = srv.stdout.readline()
        port = line.strip().rsplit(":", 1)[1]
        out = subprocess.run([sys.executable, "-m", "kangaroo", "infer", "--bundle", str(tmp / "p/bundle.kpub"),
                              "--keys", str(tmp / "k"), "--features", str(tmp / "x.csv"), "--backend",
                              "transparent", "--connect", f"127.0.0.1:{port}"],
                             capture_output=True, text=True, timeout=60)
        assert out.returncode == 0, out.stderr
        assert out.stdout.count("pi=") == 3
    finally:
        srv.terminate()
        srv.wait()


def test_json_model_format(workspace):
    tmp, f, _ = workspace
    doc = json.loads((tmp / "model.json").read_text())
    assert set(doc) == {"feature_count", "features", "trees"}
    assert set(doc["trees"][0]) == {"nodes", "leaves"}
    assert Forest.from_json(doc).to_json() == doc
