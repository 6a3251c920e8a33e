import csv
import json
import os

import numpy as np
import pytest

from reidhash import cli, hashhead, synthgen, tensornet, training
from reidhash.tensornet import NetConfig, conv, fc, pool


def run(argv):
    return cli.main(argv)


TRAIN_FLAGS = ["--bits", "16", "--epochs", "3", "--lr", "0.3",
               "--batch-size", "24", "--seed", "0"]


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """generate -> split -> train -> encode -> query, shared by the
    read-only assertions below."""
    root = tmp_path_factory.mktemp("pipeline")
    ds = root / "ds"
    assert run(["generate", "--out", str(ds), "--identities", "8",
                "--images-per-view", "2", "--height", "16", "--width", "8",
                "--seed", "3", "--split", "4/2/2"]) == 0

    net = root / "net.txt"
    tensornet.write_net_config(NetConfig(
        (16, 8, 3), (conv(3, 3, 1, 4), pool(2, 2, 2), fc(32), fc(16))), net)

    model = root / "model.bin"
    loss_log = root / "loss.csv"
    assert run(["train", "--manifest", str(ds / "train.csv"),
                "--out", str(model), "--loss-log", str(loss_log),
                "--config", str(net)] + TRAIN_FLAGS) == 0

    # split the held-out identities into camera-0 queries, camera-1 gallery
    rows = synthgen.read_manifest(ds / "test.csv")
    q_rows = [r for r in rows if r[2] == 0]
    g_rows = [r for r in rows if r[2] == 1]
    synthgen.write_manifest(ds / "test_q.csv", q_rows)
    synthgen.write_manifest(ds / "test_g.csv", g_rows)

    gallery = root / "gallery.bin"
    assert run(["encode", "--checkpoint", str(model),
                "--manifest", str(ds / "test_g.csv"),
                "--out", str(gallery)]) == 0

    results = root / "results.csv"
    assert run(["query", "--checkpoint", str(model),
                "--gallery", str(gallery),
                "--manifest", str(ds / "test_q.csv"),
                "--out", str(results)]) == 0

    return {"root": root, "ds": ds, "net": net, "model": model,
            "loss_log": loss_log, "gallery": gallery, "results": results,
            "q_rows": q_rows, "g_rows": g_rows}


def read_results(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["query-index", "rank", "gallery-image-id", "distance"]
    out = {}
    for qi, rank, gid, dist in rows[1:]:
        out.setdefault(int(qi), []).append((int(rank), int(gid), int(dist)))
    return out


# ---------------------------------------------------------------------------
# pipeline stage outputs


def test_generate_layout(ws):
    ds = ws["ds"]
    rows = synthgen.read_manifest(ds / "manifest.csv")
    assert len(rows) == 8 * 2 * 2
    for name, n_idents in (("train.csv", 4), ("val.csv", 2), ("test.csv", 2)):
        part = synthgen.read_manifest(ds / name)
        assert len({r[1] for r in part}) == n_idents
    assert os.path.isdir(ds / "images")


def test_train_outputs(ws):
    model = training.load_model(ws["model"])
    assert model.bits == 16
    with open(ws["loss_log"], newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["epoch", "batch-index", "loss-name", "value"]
    assert {r[0] for r in rows[1:]} == {"1", "2", "3"}


def test_encode_gallery_contents(ws):
    r, codes, idents, cams = hashhead.read_gallery(ws["gallery"])
    assert r == 16
    assert len(codes) == len(ws["g_rows"])
    assert idents.tolist() == [row[1] for row in ws["g_rows"]]
    assert cams.tolist() == [row[2] for row in ws["g_rows"]]


def test_encode_empty_manifest(ws, tmp_path):
    empty = tmp_path / "empty.csv"
    synthgen.write_manifest(empty, [])
    out = tmp_path / "empty.bin"
    assert run(["encode", "--checkpoint", str(ws["model"]),
                "--manifest", str(empty), "--out", str(out)]) == 0
    r, codes, idents, cams = hashhead.read_gallery(out)
    assert r == 16 and len(codes) == 0 and len(idents) == 0


def test_reencode_byte_identical(ws, tmp_path):
    out = tmp_path / "again.bin"
    assert run(["encode", "--checkpoint", str(ws["model"]),
                "--manifest", str(ws["ds"] / "test_g.csv"),
                "--out", str(out)]) == 0
    assert out.read_bytes() == ws["gallery"].read_bytes()


def test_query_results_schema(ws):
    results = read_results(ws["results"])
    assert sorted(results) == list(range(len(ws["q_rows"])))
    n_gallery = len(ws["g_rows"])
    for entries in results.values():
        ranks = [r for r, _, _ in entries]
        assert ranks == list(range(1, len(entries) + 1))
        dists = [d for _, _, d in entries]
        assert dists == sorted(dists)
        assert all(0 <= g < n_gallery for _, g, _ in entries)
        assert all(0 <= d <= 16 for d in dists)


def test_query_radius_and_topn_flags(ws, tmp_path):
    out = tmp_path / "r.csv"
    assert run(["query", "--checkpoint", str(ws["model"]),
                "--gallery", str(ws["gallery"]),
                "--manifest", str(ws["ds"] / "test_q.csv"),
                "--out", str(out), "--radius", "4"]) == 0
    for entries in read_results(out).values():
        assert all(d <= 4 for _, _, d in entries)

    assert run(["query", "--checkpoint", str(ws["model"]),
                "--gallery", str(ws["gallery"]),
                "--manifest", str(ws["ds"] / "test_q.csv"),
                "--out", str(out), "--topn", "1"]) == 0
    for entries in read_results(out).values():
        assert len(entries) <= 1
        assert entries[0][0] == 1


def test_duplicate_image_ranks_first_at_distance_zero(ws, tmp_path):
    # the first query image also placed in the gallery under camera 1:
    # identical pixels -> identical code -> distance 0 at rank 1
    ds = ws["ds"]
    q0 = ws["q_rows"][0]
    dup_manifest = ds / "dup_gallery.csv"
    synthgen.write_manifest(dup_manifest,
                            [(q0[0], q0[1], 1)] + ws["g_rows"])
    gallery = tmp_path / "dup.bin"
    assert run(["encode", "--checkpoint", str(ws["model"]),
                "--manifest", str(dup_manifest), "--out", str(gallery)]) == 0
    out = tmp_path / "dup_results.csv"
    assert run(["query", "--checkpoint", str(ws["model"]),
                "--gallery", str(gallery),
                "--manifest", str(ds / "test_q.csv"),
                "--out", str(out)]) == 0
    first = read_results(out)[0][0]
    assert first == (1, 0, 0)   # rank 1, the duplicate record, distance 0


def test_evaluate_writes_report(ws, tmp_path, capsys):
    out = tmp_path / "metrics"
    assert run(["evaluate", "--results", str(ws["results"]),
                "--query-manifest", str(ws["ds"] / "test_q.csv"),
                "--gallery-manifest", str(ws["ds"] / "test_g.csv"),
                "--out", str(out), "--bits", "16"]) == 0
    printed = capsys.readouterr().out
    assert "MAP" in printed
    data = json.loads((out / "metrics.json").read_text())
    assert data["bits"] == 16
    assert data["n_queries"] == len(ws["q_rows"])
    assert 0 <= data["map"] <= 1
    for name in ("pr.csv", "cmc.csv", "prec_at_n.csv", "timing.txt"):
        assert (out / name).exists()


def test_evaluate_single_shot_and_denominator(ws, tmp_path):
    out = tmp_path / "metrics2"
    assert run(["evaluate", "--results", str(ws["results"]),
                "--query-manifest", str(ws["ds"] / "test_q.csv"),
                "--gallery-manifest", str(ws["ds"] / "test_g.csv"),
                "--out", str(out), "--bits", "16",
                "--single-shot", "7",
                "--radius-denominator", "within-radius"]) == 0
    data = json.loads((out / "metrics.json").read_text())
    assert 0 <= data["precision_at_hamming2"] <= 1


# ---------------------------------------------------------------------------
# determinism across full reruns


def test_pipeline_rerun_byte_identical(ws, tmp_path):
    ds = ws["ds"]
    model2 = tmp_path / "model.bin"
    assert run(["train", "--manifest", str(ds / "train.csv"),
                "--out", str(model2), "--config", str(ws["net"])]
               + TRAIN_FLAGS) == 0
    assert model2.read_bytes() == ws["model"].read_bytes()

    gallery2 = tmp_path / "gallery.bin"
    run(["encode", "--checkpoint", str(model2),
         "--manifest", str(ds / "test_g.csv"), "--out", str(gallery2)])
    assert gallery2.read_bytes() == ws["gallery"].read_bytes()

    results2 = tmp_path / "results.csv"
    run(["query", "--checkpoint", str(model2), "--gallery", str(gallery2),
         "--manifest", str(ds / "test_q.csv"), "--out", str(results2)])
    assert results2.read_bytes() == ws["results"].read_bytes()

    reports = []
    for name in ("m1", "m2"):
        out = tmp_path / name
        run(["evaluate", "--results", str(results2),
             "--query-manifest", str(ds / "test_q.csv"),
             "--gallery-manifest", str(ds / "test_g.csv"),
             "--out", str(out), "--bits", "16"])
        reports.append({f: (out / f).read_bytes() for f in
                        ("metrics.json", "pr.csv", "cmc.csv", "prec_at_n.csv")})
    assert reports[0] == reports[1]


# ---------------------------------------------------------------------------
# loss comparison command


def test_compare_losses_outputs(ws, tmp_path):
    out = tmp_path / "cmp"
    assert run(["compare-losses", "--manifest", str(ws["ds"] / "train.csv"),
                "--out", str(out), "--config", str(ws["net"]),
                "--triplet-batch-size", "24",
                "--bits", "16", "--epochs", "2", "--lr", "0.3",
                "--batch-size", "24", "--seed", "0"]) == 0
    with open(out / "summary.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["loss-name", "initial-loss", "final-loss",
                       "epochs-to-half", "diverged"]
    assert [r[0] for r in rows[1:]] == list(training.LOSS_NAMES)
    assert all(r[4] == "0" for r in rows[1:])
    for name in training.LOSS_NAMES:
        with open(out / f"loss_{name}.csv", newline="") as f:
            curve = list(csv.reader(f))
        assert curve[0] == ["epoch", "mean-loss"]
        assert len(curve) == 3


def test_compare_losses_partial_on_divergence(ws, tmp_path, capsys):
    out = tmp_path / "cmp_div"
    assert run(["compare-losses", "--manifest", str(ws["ds"] / "train.csv"),
                "--out", str(out), "--config", str(ws["net"]),
                "--margin", "inf", "--triplet-batch-size", "24",
                "--bits", "16", "--epochs", "2", "--batch-size", "24"]) == 0
    err = capsys.readouterr().err
    assert "partial report" in err
    with open(out / "summary.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert all(r[4] == "1" for r in rows[1:])


# ---------------------------------------------------------------------------
# failure modes


def test_bit_width_mismatch_is_usage_error(ws, tmp_path, capsys):
    model8 = tmp_path / "model8.bin"
    assert run(["train", "--manifest", str(ws["ds"] / "train.csv"),
                "--out", str(model8), "--config", str(ws["net"]),
                "--bits", "8", "--epochs", "0", "--batch-size", "24"]) == 0
    code = run(["query", "--checkpoint", str(model8),
                "--gallery", str(ws["gallery"]),
                "--manifest", str(ws["ds"] / "test_q.csv"),
                "--out", str(tmp_path / "r.csv")])
    assert code == 2
    assert "16-bit" in capsys.readouterr().err


def test_missing_manifest_is_usage_error(tmp_path, capsys):
    code = run(["train", "--manifest", str(tmp_path / "nope.csv"),
                "--out", str(tmp_path / "m.bin")])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_divergence_exit_code(ws, tmp_path, capsys):
    code = run(["train", "--manifest", str(ws["ds"] / "train.csv"),
                "--out", str(tmp_path / "m.bin"), "--config", str(ws["net"]),
                "--margin", "inf", "--epochs", "1", "--batch-size", "24"])
    assert code == 3
    assert "error" in capsys.readouterr().err


def test_bad_split_spec_is_usage_error(tmp_path, capsys):
    code = run(["generate", "--out", str(tmp_path / "d"),
                "--identities", "4", "--height", "16", "--width", "8",
                "--split", "2/2"])
    assert code == 2
    capsys.readouterr()


def test_evaluate_rejects_out_of_range_ids(ws, tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    with open(bad, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["query-index", "rank", "gallery-image-id", "distance"])
        w.writerow([0, 1, 9999, 0])
    code = run(["evaluate", "--results", str(bad),
                "--query-manifest", str(ws["ds"] / "test_q.csv"),
                "--gallery-manifest", str(ws["ds"] / "test_g.csv"),
                "--out", str(tmp_path / "m")])
    assert code == 2
    assert "gallery" in capsys.readouterr().err
