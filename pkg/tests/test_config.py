import pytest

from pointmine import config as C
from pointmine.pipeline import PipelineConfig


def test_defaults_cover_every_key():
    d = C.defaults()
    assert set(d) == {k.name for k in C.KEYS}
    assert d["bms.k"] == 3 and d["srm.alpha"] == 0.25 and d["affinity.kernel_sizes"] == [5, 5, 3, 3]


def test_reference_values_tagged():
    assert C.BY_NAME["pnpg.t_neg1"].source == C.REF
    assert C.BY_NAME["seed"].source == C.LOCAL


def test_parse_text_and_build():
    vals = C.parse_text("# comment\nmode = guided\nbms.k = 5  # trailing\nsasd.standardize = off\n"
                        "affinity.kernel_sizes = 3, 3\nsrm.iters = 7\n")
    cfg = C.build(vals)
    assert cfg.mode == "guided" and cfg.bms.k == 5 and cfg.sasd.standardize is False
    assert cfg.affinity.kernel_sizes == [3, 3] and cfg.srm.trainer.iters == 7
    # nested replace leaves the other trainers alone
    assert cfg.psm_trainer.iters == PipelineConfig().psm_trainer.iters


def test_dump_round_trip():
    cfg = C.build({"distance.d": 0.5, "parallelism": 4})
    assert C.build(C.parse_text(C.dump(cfg))) == cfg


@pytest.mark.parametrize("text, match", [
    ("bogus = 1", "unknown key"),
    ("mode guided", "expected key = value"),
    ("bms.k = three", "cannot parse"),
    ("sasd.standardize = maybe", "cannot parse"),
])
def test_parse_errors(text, match):
    with pytest.raises(C.ConfigError, match=match):
        C.parse_text(text, "f.cfg")


def test_error_location():
    with pytest.raises(C.ConfigError, match=r"f\.cfg:2"):
        C.parse_text("mode = mil\nnope = 1", "f.cfg")


@pytest.mark.parametrize("vals", [{"bms.k": 0}, {"mode": "other"}, {"affinity.kernel_sizes": [4]},
                                  {"distance.d": -1.0}])
def test_module_validation_surfaces(vals):
    with pytest.raises(C.ConfigError):
        C.build(vals)


def test_unreadable_file(tmp_path):
    with pytest.raises(C.ConfigError, match="cannot read"):
        C.load_file(tmp_path / "missing.cfg")
