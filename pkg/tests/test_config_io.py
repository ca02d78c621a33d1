import numpy as np
import pytest

from hermfield.config import (
    ConfigError,
    TrainConfig,
    apply_overrides,
    env_overrides,
    parse_config,
    serialize_config,
)
from hermfield.encoding import EncodingConfig
from hermfield.field import make_model
from hermfield.io import (
    format_metrics_csv,
    load_checkpoint,
    params_from_checkpoint,
    parse_metrics_csv,
    read_field_dump,
    save_checkpoint,
    write_field_dump,
)
from hermfield.problems import convection1p1d, helmholtz2d


class TestConfigRoundTrip:
    def test_default_round_trips(self):
        cfg = TrainConfig()
        text = serialize_config(cfg)
        again = parse_config(text)
        assert again == cfg
        assert parse_config(serialize_config(again)) == again

    def test_modified_round_trips(self):
        cfg = TrainConfig()
        cfg.problem.name = "convection"
        cfg.problem.c = 30.0
        cfg.encoding.log2_tables = (14, 14, 10)
        cfg.encoding.n_max = 64
        cfg.encoding.ratio = None
        cfg.run.deterministic = False
        cfg.run.eval_shape = (64, 64)
        assert parse_config(serialize_config(cfg)) == cfg

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config("[nonsense]\nx = 1\n")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("[encoding]\nlvls = 8\n")

    def test_manifest_section_ignored(self):
        cfg = parse_config("[manifest]\nbuild_id = abc\n\n[run]\nepochs = 5\n")
        assert cfg.run.epochs == 5

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("[run]\ndeterministic = maybe\n")
        with pytest.raises(ConfigError):
            parse_config("[curriculum]\ntype = zigzag\n")
        with pytest.raises(ConfigError):
            parse_config("[run]\nepochs = 0\n")


class TestOverrides:
    def test_set_override(self):
        cfg = TrainConfig()
        apply_overrides(cfg, ["optimizer.lr0=0.5", "encoding.levels=4"])
        assert cfg.optimizer.lr0 == 0.5
        assert cfg.encoding.levels == 4

    def test_tuple_override(self):
        cfg = TrainConfig()
        apply_overrides(cfg, ["encoding.log2_tables=10,10,8"])
        assert cfg.encoding.log2_tables == (10, 10, 8)

    def test_bad_override_rejected(self):
        with pytest.raises(ConfigError):
            apply_overrides(TrainConfig(), ["optimizer.nope=1"])
        with pytest.raises(ConfigError):
            apply_overrides(TrainConfig(), ["no_equals"])

    def test_env_overrides(self):
        env = {"HERMFIELD_RUN__EPOCHS": "123", "OTHER": "x"}
        out = env_overrides(env)
        assert out == ["run.epochs=123"]
        cfg = apply_overrides(TrainConfig(), out)
        assert cfg.run.epochs == 123


def small_model(problem=None, levels=2):
    problem = problem or helmholtz2d(2.0)
    cfg = EncodingConfig(
        dim=problem.dim,
        levels=levels,
        table_sizes=(2**6,) * (problem.dim + 1),
        features=2,
        n_min=3,
        ratio=1.6,
    )
    return problem, make_model(problem, cfg, width=8, depth=2)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        problem, model = small_model()
        params = model.init_params(1, 2)
        path = str(tmp_path / "ck.hngp")
        save_checkpoint(path, model, params)
        ck = load_checkpoint(path)
        again = params_from_checkpoint(model, ck)
        np.testing.assert_array_equal(params, again)

    def test_geometry_mismatch_rejected(self, tmp_path):
        problem, model = small_model()
        path = str(tmp_path / "ck.hngp")
        save_checkpoint(path, model, model.init_params(1, 2))
        _, other = small_model(convection1p1d(3.0), levels=3)
        with pytest.raises(ValueError, match="geometry|shape"):
            params_from_checkpoint(other, load_checkpoint(path))

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "junk.bin")
        with open(path, "wb") as fh:
            fh.write(b"NOTMAGIC" * 4)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)


class TestFieldDump:
    def test_round_trip_and_length(self, tmp_path):
        rng = np.random.default_rng(0)
        shape = (5, 7)
        values = rng.standard_normal((35, 3))
        path = str(tmp_path / "f.dump")
        write_field_dump(path, values, shape, [0.0, -1.0], [1.0, 2.0])
        import os

        header = 8 + 8 + 4 * 2 + 16 * 2
        assert os.path.getsize(path) == header + 35 * 3 * 8
        rshape, (lo, hi), payload = read_field_dump(path)
        assert rshape == shape
        np.testing.assert_array_equal(lo, [0.0, -1.0])
        np.testing.assert_array_equal(hi, [1.0, 2.0])
        np.testing.assert_array_equal(payload, values)

    def test_shape_mismatch_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="payload"):
            write_field_dump(
                str(tmp_path / "x"), np.zeros((10, 1)), (3, 3), [0, 0], [1, 1]
            )

    def test_trailing_bytes_rejected(self, tmp_path):
        path = str(tmp_path / "f.dump")
        write_field_dump(path, np.zeros((4, 1)), (2, 2), [0, 0], [1, 1])
        with open(path, "ab") as fh:
            fh.write(b"\x00")
        with pytest.raises(ValueError, match="trailing"):
            read_field_dump(path)


class TestMetricsCsv:
    def test_round_trip(self):
        rows = [
            {
                "epoch": 499,
                "loss_pde": 1.2345678901234567e-3,
                "loss_bc": 0.5,
                "loss_ic": 0.0,
                "lambda_bc": 1.4,
                "lr": 1e-3,
                "active_levels": 3,
                "rel_l2": 0.9999,
                "wall_ms": 0.0,
            }
        ]
        text = format_metrics_csv(rows)
        again = parse_metrics_csv(text)
        assert again == rows
        # deterministic: same input, same bytes
        assert format_metrics_csv(rows) == text
