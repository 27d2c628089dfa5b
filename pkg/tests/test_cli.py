import json

import pytest

from camf.checkpoint import load_checkpoint
from camf.cli import main
from camf.data import load_dataset
from camf.inference import Model, ensemble_decode, write_submission
from camf.tokenizer import Vocabulary
from test_metrics import oracle_bleu

TINY = {
    "model": {"d_model": 8, "heads": 2, "layers": 1, "d_ff": 16, "dropout": 0.0, "max_len": 64},
    "train": {"batch_size": 4, "max_epochs": 2, "patience": 2, "warmup_steps": 4},
    "vocab_size": 80,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-fixture", "--out-dir", str(root / "data"), "--n", "6", "--dim", "8"]) == 0
    (root / "tiny.json").write_text(json.dumps(TINY))
    code = main(["train", "--train", str(root / "data/syn.train.json"), "--dev", str(root / "data/syn.dev.json"),
                 "--config", str(root / "tiny.json"), "--embed-dim", "8", "--seeds", "1,2,3,4,5",
                 "--out-dir", str(root / "run")])
    assert code == 0
    return root


def _train_args(root, *extra):
    return ["train", "--train", str(root / "data/syn.train.json"), "--dev", str(root / "data/syn.dev.json"),
            "--config", str(root / "tiny.json"), "--embed-dim", "8", *extra]


def _generate(root, out, *ckpts):
    return main(["generate", "--test", str(root / "data/syn.test.json"), "--out", str(out),
                 "--checkpoints", *[str(root / "run" / c / "model.json") for c in ckpts]])


class TestTrain:
    def test_one_checkpoint_per_seed(self, workspace):
        for seed in range(1, 6):
            assert (workspace / f"run/seed{seed}/model.json").exists()
            assert (workspace / f"run/seed{seed}/model.bin").exists()
        manifest = json.loads((workspace / "run/run_manifest.json").read_text())
        assert manifest["seeds"] == [1, 2, 3, 4, 5]
        assert manifest["model"]["d_model"] == 8 and manifest["model"]["cross_attention"] == "literal"

    def test_log_lines_per_epoch(self, workspace):
        lines = [json.loads(x) for x in (workspace / "run/seed1/log.jsonl").read_text().splitlines()]
        assert sum(r["kind"] == "epoch" for r in lines) == 2

    def test_seeds_differ(self, workspace):
        a = (workspace / "run/seed1/model.bin").read_bytes()
        assert a != (workspace / "run/seed2/model.bin").read_bytes()

    def test_flags_override_config_file(self, workspace, tmp_path):
        assert main(_train_args(workspace, "--lambda", "0.5", "--max-epochs", "1", "--out-dir", str(tmp_path))) == 0
        manifest = json.loads((tmp_path / "run_manifest.json").read_text())
        assert manifest["train"]["lam"] == 0.5 and manifest["train"]["max_epochs"] == 1
        assert manifest["train"]["batch_size"] == 4

    def test_missing_train_path(self, workspace, tmp_path, capsys):
        args = _train_args(workspace, "--out-dir", str(tmp_path))
        args[2] = str(tmp_path / "nope.json")
        assert main(args) == 2
        assert "does not exist" in capsys.readouterr().err

    @pytest.mark.parametrize("extra", [["--seeds", "1,1"], ["--seeds", "x"], ["--corruption-p", "2"]])
    def test_usage_errors(self, workspace, tmp_path, extra):
        assert main(_train_args(workspace, "--out-dir", str(tmp_path), *extra)) == 2

    def test_missing_required_flag(self):
        assert main(["train", "--dev", "x"]) == 2

    def test_unknown_config_field(self, workspace, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"model": {"depth": 3}}))
        args = _train_args(workspace, "--out-dir", str(tmp_path))
        args[args.index("--config") + 1] = str(bad)
        assert main(args) == 2

    def test_width_mismatch_is_data_error(self, workspace, tmp_path):
        args = _train_args(workspace, "--out-dir", str(tmp_path))
        args[args.index("--embed-dim") + 1] = "256"
        assert main(args) == 3

    def test_thread_cap(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv("CAMF_THREADS", "1")
        assert main(_train_args(workspace, "--max-epochs", "1", "--out-dir", str(tmp_path))) == 0


class TestGenerate:
    def test_single_checkpoint_is_reproducible(self, workspace, tmp_path):
        assert _generate(workspace, tmp_path / "a.json", "seed1") == 0
        assert _generate(workspace, tmp_path / "b.json", "seed1") == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_same_checkpoint_twice(self, workspace, tmp_path):
        _generate(workspace, tmp_path / "once.json", "seed1")
        _generate(workspace, tmp_path / "twice.json", "seed1", "seed1")
        assert (tmp_path / "once.json").read_bytes() == (tmp_path / "twice.json").read_bytes()

    def test_three_checkpoint_ensemble(self, workspace, tmp_path):
        assert _generate(workspace, tmp_path / "ens.json", "seed1", "seed2", "seed3") == 0
        vocab = Vocabulary.load(workspace / "run/vocab.json")
        models = []
        for seed in (1, 2, 3):
            params, cfg, _ = load_checkpoint(workspace / f"run/seed{seed}/model.json")
            models.append(Model(params, cfg, vocab))
        test = load_dataset(workspace / "data/syn.test.json", dim=8)
        expected = [ensemble_decode(models, e).text for e in test]
        got = json.loads((tmp_path / "ens.json").read_text())
        assert [r["gloss"] for r in got] == expected
        assert [r["id"] for r in got] == [e.id for e in test]

    def test_mismatched_vocabularies(self, workspace, tmp_path):
        other = tmp_path / "other"
        cfg = dict(TINY, vocab_size=70)
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        args = _train_args(workspace, "--out-dir", str(other), "--max-epochs", "1")
        args[args.index("--config") + 1] = str(tmp_path / "c.json")
        assert main(args) == 0
        code = main(["generate", "--test", str(workspace / "data/syn.test.json"), "--out", str(tmp_path / "x.json"),
                     "--checkpoints", str(workspace / "run/seed1/model.json"), str(other / "seed0/model.json")])
        assert code == 3

    def test_missing_checkpoint(self, workspace, tmp_path):
        assert _generate(workspace, tmp_path / "x.json", "seed99") == 2


class TestEvaluate:
    def _evaluate(self, workspace, sub, capsys, *extra):
        code = main(["evaluate", "--submission", str(sub), "--test", str(workspace / "data/syn.test.json"), *extra])
        return code, capsys.readouterr().out

    def test_identical_submission(self, workspace, tmp_path, capsys):
        test = load_dataset(workspace / "data/syn.test.json", dim=8)
        write_submission(tmp_path / "s.json", [e.id for e in test], [e.gloss for e in test])
        code, out = self._evaluate(workspace, tmp_path / "s.json", capsys)
        report = json.loads(out)
        assert code == 0
        assert report == {"count": 6, "sentence_bleu": 1.0, "lemma_bleu": 1.0, "moverscore": "n/a"}

    def test_matches_oracle(self, workspace, tmp_path, capsys):
        test = load_dataset(workspace / "data/syn.test.json", dim=8)
        hyps = [" ".join(e.gloss.split()[::2]) for e in test]
        write_submission(tmp_path / "s.json", [e.id for e in test], hyps)
        tsv = tmp_path / "lemmas.tsv"
        tsv.write_text("carries\tcarry\nholds\thold\n")
        code, out = self._evaluate(workspace, tmp_path / "s.json", capsys, "--lemma-map", str(tsv))
        report = json.loads(out)
        expected = sum(oracle_bleu(h.split(), e.gloss.split()) for h, e in zip(hyps, test)) / len(hyps)
        assert code == 0
        assert report["sentence_bleu"] == pytest.approx(expected, abs=1e-12)

    def test_empty_submission(self, workspace, tmp_path, capsys):
        (tmp_path / "s.json").write_text("[]")
        code, _ = self._evaluate(workspace, tmp_path / "s.json", capsys)
        assert code == 3

    def test_id_mismatch_names_first(self, workspace, tmp_path, capsys):
        test = load_dataset(workspace / "data/syn.test.json", dim=8)
        ids = [e.id for e in test]
        ids[2] = "stranger"
        write_submission(tmp_path / "s.json", ids, ["x"] * len(ids))
        code = main(["evaluate", "--submission", str(tmp_path / "s.json"),
                     "--test", str(workspace / "data/syn.test.json")])
        assert code == 3
        assert test[2].id in capsys.readouterr().err


def test_vocab_command(workspace, tmp_path, capsys):
    out = tmp_path / "v.json"
    assert main(["vocab", "--train", str(workspace / "data/syn.train.json"), "--embed-dim", "8",
                 "--vocab-size", "60", "--out", str(out)]) == 0
    assert len(Vocabulary.load(out)) == json.loads(capsys.readouterr().out)["size"]
