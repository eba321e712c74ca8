import json
import re

import numpy as np
import pytest
from PIL import Image

from cddod.cli import main


def write_config(path, datasets, **extra):
    values = dict(
        source_manifest=datasets / "A", target_manifest=datasets / "B", epochs=1, lr=0.005, seed=2, max_pages=2
    )
    values.update(extra)
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
    return path


@pytest.fixture(scope="module")
def trained_run(datasets, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp / "train.txt", datasets)
    assert main(["train", "--config", str(cfg), "--runs-dir", str(tmp / "runs")]) == 0
    (run,) = (tmp / "runs").iterdir()
    return run


def test_generate_is_reproducible(tmp_path):
    for d in ("x", "y"):
        assert main(["generate", "--domain", "B", "--pages", "2", "--seed", "7", "--out", str(tmp_path / d)]) == 0
    names = sorted(p.name for p in (tmp_path / "x").iterdir())
    assert "manifest.json" in names and len(names) == 9
    assert all((tmp_path / "x" / n).read_bytes() == (tmp_path / "y" / n).read_bytes() for n in names)


def test_generate_bad_output_dir(tmp_path, capsys):
    blocker = tmp_path / "f"
    blocker.write_text("")
    assert main(["generate", "--domain", "A", "--pages", "1", "--out", str(blocker / "d")]) != 0
    assert "error:" in capsys.readouterr().err
    assert main(["generate", "--domain", "Z", "--pages", "1", "--out", str(tmp_path / "z")]) != 0


def test_maskgen_writes_one_mask_per_page(datasets, tmp_path):
    assert main(["maskgen", "--manifest", str(datasets / "A"), "--out", str(tmp_path)]) == 0
    masks = sorted(tmp_path.glob("*.mask.png"))
    assert len(masks) == 6
    arr = np.asarray(Image.open(masks[0]))
    assert arr.shape == (640, 640) and set(np.unique(arr)) <= {0, 1, 2}


def test_train_run_layout(trained_run):
    assert re.fullmatch(r"\d{8}-\d{6}-seed2", trained_run.name)
    assert (trained_run / "checkpoints" / "epoch01.ckpt").exists()
    assert (trained_run / "model.ckpt").exists()
    recs = [json.loads(l) for l in (trained_run / "train_log.jsonl").read_text().splitlines()]
    assert len(recs) == 2 and {"l_det", "l_p", "l_r", "l_s", "total"} <= set(recs[0])
    assert "seed = 2" in (trained_run / "config.txt").read_text()


def test_train_rejects_bad_config(datasets, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.txt", datasets, gamma=-1)
    assert main(["train", "--config", str(cfg), "--runs-dir", str(tmp_path)]) == 2
    assert "gamma" in capsys.readouterr().err
    assert main(["train", "--set", "epochs=1", "--runs-dir", str(tmp_path)]) == 2


def test_eval_twice_identical(trained_run, datasets, tmp_path):
    ck = str(trained_run / "model.ckpt")
    for name in ("a.json", "b.json"):
        assert main(["eval", "--checkpoint", ck, "--manifest", str(datasets / "B"), "--out", str(tmp_path / name)]) == 0
    a, b = (json.loads((tmp_path / n).read_text()) for n in ("a.json", "b.json"))
    assert a == b and a["interpolation"] == "all-points" and a["n_images"] == 2


def test_eval_default_report_in_run_dir(trained_run, datasets):
    assert main(["eval", "--checkpoint", str(trained_run / "model.ckpt"), "--manifest", str(datasets / "B")]) == 0
    assert (trained_run / "eval_B_test.json").exists()


def test_eval_rejects_class_mismatch(trained_run, datasets, capsys):
    args = ["eval", "--checkpoint", str(trained_run / "model.ckpt"), "--manifest", str(datasets / "B")]
    assert main(args + ["--classes", "text,list,heading,table"]) == 2
    assert "do not match" in capsys.readouterr().err


def test_eval_empty_split_flags_and_succeeds(trained_run, tmp_path):
    assert main(["generate", "--domain", "A", "--pages", "2", "--out", str(tmp_path / "d"), "--test-fraction", "0"]) == 0
    out = tmp_path / "r.json"
    args = ["eval", "--checkpoint", str(trained_run / "model.ckpt"), "--manifest", str(tmp_path / "d"), "--out", str(out)]
    assert main(args) == 0
    rep = json.loads(out.read_text())
    assert rep["map"] == 0.0 and "empty evaluation set" in rep["flags"]


def test_infer_matches_eval_predictions(trained_run, datasets, tmp_path):
    from cddod.training import load_model, load_split, predict

    page = load_split(datasets / "B", "test", 1)[0]
    img = datasets / "B" / f"{page.page_id}.png"
    out = tmp_path / "d.jsonl"
    assert main(["infer", "--checkpoint", str(trained_run / "model.ckpt"), str(img), "--out", str(out)]) == 0
    got = [json.loads(l) for l in out.read_text().splitlines()]
    det, _ = load_model(trained_run / "model.ckpt")
    ref = [d.to_json(page.page_id) for d in predict(det, [page])[page.page_id]]
    assert got == ref


def test_infer_rejects_bad_size(trained_run, tmp_path):
    path = tmp_path / "odd.png"
    Image.fromarray(np.full((100, 100), 255, np.uint8)).save(path)
    assert main(["infer", "--checkpoint", str(trained_run / "model.ckpt"), str(path)]) == 2


def test_report_summarises_run(trained_run, datasets):
    main(["eval", "--checkpoint", str(trained_run / "model.ckpt"), "--manifest", str(datasets / "B")])
    assert main(["report", "--run", str(trained_run)]) == 0
    text = (trained_run / "report.md").read_text()
    assert "## Training" in text and "mAP@0.5" in text


def test_ablate_writes_table(datasets, tmp_path):
    cfg = write_config(tmp_path / "c.txt", datasets)
    assert main(["ablate", "--config", str(cfg), "--seeds", "0", "--runs-dir", str(tmp_path / "runs")]) == 0
    (run,) = (tmp_path / "runs").iterdir()
    rows = json.loads((run / "ablation.json").read_text())["rows"]
    assert [r["label"] for r in rows][-1] == "FPN + FPA + RA + RLA" and len(rows) == 4
