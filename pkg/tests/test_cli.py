import numpy as np
import pytest

from rescodec.cli import EXIT_DOMAIN, EXIT_IO, EXIT_OK, EXIT_USAGE, load_external_templates, run
from rescodec.model import EntropyModel, checkpoint_bytes
from rescodec.pipeline import write_atomic
from rescodec.ppm import read_image, write_image

from conftest import model_from_seed, random_test_image, tiny_config
from rescodec.autodiff import rng


@pytest.fixture(scope="module")
def ckpt_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "model.ckpt"
    model = model_from_seed(tiny_config(3), seed=105)
    write_atomic(path, checkpoint_bytes(model.to_checkpoint(seed=105)))
    return path


@pytest.fixture()
def sample_image(tmp_path):
    img = random_test_image(rng(64), 10, 12, 3)
    path = tmp_path / "input.ppm"
    write_image(path, img)
    return path, img


class TestEncodeDecode:
    def test_roundtrip_byte_identical_ppm(self, ckpt_path, sample_image, tmp_path, capsys):
        src, _ = sample_image
        enc_out = tmp_path / "x.resc"
        dec_out = tmp_path / "y.ppm"
        assert run(["encode", "-i", str(src), "-o", str(enc_out), "-m", str(ckpt_path),
                    "--backend", "qdown:2", "--checksum"]) == EXIT_OK
        assert run(["decode", "-i", str(enc_out), "-o", str(dec_out),
                    "-m", str(ckpt_path)]) == EXIT_OK
        assert src.read_bytes() == dec_out.read_bytes()

    def test_wrong_checkpoint_refuses_and_writes_nothing(self, ckpt_path, sample_image,
                                                         tmp_path):
        src, _ = sample_image
        enc_out = tmp_path / "x.resc"
        run(["encode", "-i", str(src), "-o", str(enc_out), "-m", str(ckpt_path)])
        other = tmp_path / "other.ckpt"
        write_atomic(other, checkpoint_bytes(
            model_from_seed(tiny_config(3), seed=404).to_checkpoint()))
        dec_out = tmp_path / "should_not_exist.ppm"
        code = run(["decode", "-i", str(enc_out), "-o", str(dec_out), "-m", str(other)])
        assert code == EXIT_DOMAIN
        assert not dec_out.exists()

    def test_missing_input_is_io_error(self, ckpt_path, tmp_path):
        code = run(["encode", "-i", str(tmp_path / "nope.ppm"),
                    "-o", str(tmp_path / "o.resc"), "-m", str(ckpt_path)])
        assert code == EXIT_IO

    def test_inspect_consistent_with_bpsp(self, ckpt_path, sample_image, tmp_path, capsys):
        src, img = sample_image
        enc_out = tmp_path / "x.resc"
        run(["encode", "-i", str(src), "-o", str(enc_out), "-m", str(ckpt_path)])
        capsys.readouterr()
        assert run(["inspect", "-i", str(enc_out)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "lossy" in out and "residual" in out and "header" in out
        parts = {}
        for token in ("lossy", "residual", "header"):
            for line in out.splitlines():
                if "=" in line and "bpsp" in line:
                    # "lossy A + residual B + header C = D bpsp"
                    words = line.replace("=", "+").split("+")
                    parts["lossy"] = float(words[0].split()[-1])
                    parts["residual"] = float(words[1].split()[-1])
                    parts["header"] = float(words[2].split()[-1])
                    parts["total"] = float(words[3].split()[0])
        assert parts["total"] == pytest.approx(
            parts["lossy"] + parts["residual"] + parts["header"], abs=0.01)
        assert parts["total"] == pytest.approx(8 * enc_out.stat().st_size / img.size,
                                               abs=0.001)


class TestUsageErrors:
    def test_unknown_flag_exits_2(self, capsys):
        assert run(["encode", "--definitely-not-a-flag"]) == EXIT_USAGE

    def test_no_subcommand_exits_2(self, capsys):
        assert run([]) == EXIT_USAGE

    def test_unknown_subcommand_exits_2(self, capsys):
        assert run(["compress"]) == EXIT_USAGE


class TestExternalConfig:
    def test_parse_and_roundtrip(self, ckpt_path, sample_image, tmp_path, capsys):
        src, _ = sample_image
        conf = tmp_path / "ext.conf"
        conf.write_text(
            "# stub codec that just copies bytes\n"
            "copy.encode = cp {in} {out}\n"
            "copy.decode = cp {in} {out}\n")
        templates = load_external_templates(conf)
        assert templates == {"copy": ("cp {in} {out}", "cp {in} {out}")}
        enc_out = tmp_path / "x.resc"
        dec_out = tmp_path / "y.ppm"
        assert run(["encode", "-i", str(src), "-o", str(enc_out), "-m", str(ckpt_path),
                    "--backend", "external:copy", "--external-config", str(conf)]) == EXIT_OK
        assert run(["decode", "-i", str(enc_out), "-o", str(dec_out), "-m", str(ckpt_path),
                    "--external-config", str(conf)]) == EXIT_OK
        assert src.read_bytes() == dec_out.read_bytes()

    def test_incomplete_config_rejected(self, tmp_path):
        conf = tmp_path / "bad.conf"
        conf.write_text("x.encode = cp {in} {out}\n")
        with pytest.raises(Exception, match="incomplete"):
            load_external_templates(conf)

    def test_missing_template_is_domain_error(self, ckpt_path, sample_image, tmp_path,
                                              capsys):
        src, _ = sample_image
        code = run(["encode", "-i", str(src), "-o", str(tmp_path / "x.resc"),
                    "-m", str(ckpt_path), "--backend", "external:ghost"])
        assert code == EXIT_DOMAIN


class TestTrainEval:
    def test_train_then_eval_via_cli(self, tmp_path, capsys):
        from conftest import laplace_textured_image, write_corpus

        corpus = tmp_path / "corpus"
        write_corpus(corpus, count=4, size=24, channels=3, seed=50,
                     maker=laplace_textured_image)
        ckpt = tmp_path / "trained.ckpt"
        code = run(["train", "--corpus", str(corpus), "-o", str(ckpt),
                    "--steps", "4", "--batch-size", "2", "--lr", "1e-3",
                    "--seed", "3", "--patch-size", "8", "--width", "32",
                    "--layers", "1", "--heads", "2", "--mixtures", "2",
                    "--global-tokens", "4", "--val-fraction", "0.0"])
        assert code == EXIT_OK
        assert ckpt.exists()
        capsys.readouterr()
        assert run(["eval", "-m", str(ckpt), "--corpus", str(corpus),
                    "--backend", "qdown:2", "--limit", "1"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "mean" in out
