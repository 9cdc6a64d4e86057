import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from detbench.errors import InputError
from detbench.schedule import (
    OneCycleConfig,
    TrainingRecipe,
    emit_recipe,
    format_kv,
    lr_at,
    onecycle_from_kv,
    parse_kv,
    parse_recipe,
    schedule,
    schedule_csv,
)


def closed_form(cfg, step):
    """Textbook form of the two half-cosine phases."""
    r = round(cfg.pct_start * cfg.total_steps)
    if step <= r:
        return cfg.max_lr - 0.5 * (cfg.max_lr - cfg.initial_lr) * (1 + math.cos(math.pi * step / r))
    t = (step - r) / (cfg.total_steps - r)
    return cfg.final_lr + 0.5 * (cfg.max_lr - cfg.final_lr) * (1 + math.cos(math.pi * t))


configs = st.builds(
    lambda total, pct, mx, a, b: OneCycleConfig(total, mx, mx * a, mx * b, pct),
    st.integers(10, 400),
    st.floats(0.1, 0.9),
    st.floats(1e-4, 1.0),
    st.floats(0.01, 0.99),
    st.floats(0.01, 0.99),
)


class TestLr:
    def test_endpoints(self):
        cfg = OneCycleConfig(100)
        assert lr_at(cfg, 0) == 0.001
        assert lr_at(cfg, 30) == 0.01
        assert lr_at(cfg, 100) == 0.001

    def test_mid_anneal(self):
        assert lr_at(OneCycleConfig(100), 65) == pytest.approx(0.0055, abs=1e-15)

    def test_matches_closed_form(self):
        cfg = OneCycleConfig(137, pct_start=0.25)
        for s in range(138):
            assert lr_at(cfg, s) == pytest.approx(closed_form(cfg, s), rel=1e-12)

    @pytest.mark.parametrize("step", [-1, 101])
    def test_out_of_range(self, step):
        with pytest.raises(InputError):
            lr_at(OneCycleConfig(100), step)

    @pytest.mark.parametrize(
        "kwargs",
        [dict(total_steps=1), dict(total_steps=10, initial_lr=0.02), dict(total_steps=10, final_lr=0.0),
         dict(total_steps=10, pct_start=1.0), dict(total_steps=10, anneal="linear"), dict(total_steps=2, pct_start=0.1)],
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(InputError):
            OneCycleConfig(**kwargs)

    @settings(max_examples=100, deadline=None)
    @given(configs)
    def test_range(self, cfg):
        lrs = schedule(cfg)
        assert np.all(lrs >= min(cfg.initial_lr, cfg.final_lr))
        assert np.all(lrs <= cfg.max_lr)

    @settings(max_examples=100, deadline=None)
    @given(configs)
    def test_unimodal_peak_at_ramp_end(self, cfg):
        lrs = schedule(cfg)
        r = cfg.ramp_steps
        assert lrs[r] == cfg.max_lr
        assert int(np.argmax(lrs)) == r
        assume(cfg.initial_lr < cfg.max_lr and cfg.final_lr < cfg.max_lr)
        assert np.all(np.diff(lrs[: r + 1]) > 0)
        assert np.all(np.diff(lrs[r:]) < 0)

    @settings(max_examples=100, deadline=None)
    @given(configs)
    def test_adjacent_step_bounds_per_phase(self, cfg):
        lrs = schedule(cfg)
        ramp_bound, anneal_bound = cfg.step_bounds()
        r = cfg.ramp_steps
        d = np.abs(np.diff(lrs))
        assert np.all(d[:r] <= ramp_bound * (1 + 1e-9))
        assert np.all(d[r:] <= anneal_bound * (1 + 1e-9))

    def test_csv(self):
        lines = schedule_csv(OneCycleConfig(100)).splitlines()
        assert lines[0] == "step,lr"
        assert len(lines) == 102
        assert max(float(l.split(",")[1]) for l in lines[1:]) == 0.01
        assert schedule_csv(OneCycleConfig(100)) == schedule_csv(OneCycleConfig(100))


class TestRecipe:
    def test_default_endpoints(self):
        doc = parse_kv(emit_recipe(TrainingRecipe()))
        assert doc["batch_size"] == "32"
        assert doc["epochs"] == "50"
        assert doc["momentum"] == "0.937"
        assert doc["weight_decay"] == "0.0005"
        assert doc["image_size"] == "320"
        assert doc["classes"] == '["with mask", "incorrect mask", "without mask"]'

    def test_keys_sorted_and_deterministic(self):
        text = emit_recipe(TrainingRecipe())
        keys = [l.split(" = ")[0] for l in text.splitlines() if l and not l.startswith("#")]
        assert keys == sorted(keys)
        assert text == emit_recipe(TrainingRecipe())

    def test_round_trip_default(self):
        r = TrainingRecipe()
        assert parse_recipe(emit_recipe(r)) == r

    @settings(max_examples=50, deadline=None)
    @given(
        st.integers(1, 512), st.integers(1, 500), st.floats(0.01, 0.99), st.floats(1e-6, 0.1),
        st.lists(st.text(st.characters(blacklist_categories=("Cc", "Cs")), min_size=1, max_size=12), min_size=1, max_size=5, unique=True),
        configs,
    )
    def test_round_trip_random(self, batch, epochs, mom, wd, classes, lr):
        r = TrainingRecipe(batch, epochs, mom, wd, 320, lr, classes=tuple(classes))
        assert parse_recipe(emit_recipe(r)) == r

    def test_invalid(self):
        with pytest.raises(InputError):
            TrainingRecipe(batch_size=0)
        with pytest.raises(InputError):
            TrainingRecipe(classes=())
        with pytest.raises(InputError):
            TrainingRecipe(classes=("a", "a"))
        with pytest.raises(InputError):
            parse_recipe("nonsense = 1\n")
        with pytest.raises(InputError):
            parse_recipe("epochs = fifty\n")


class TestKV:
    def test_comments_and_whitespace(self):
        assert parse_kv("# c\n\n a =1 \nb= x = y\n") == {"a": "1", "b": "x = y"}

    def test_errors(self):
        with pytest.raises(InputError):
            parse_kv("novalue\n")
        with pytest.raises(InputError):
            parse_kv("a = 1\na = 2\n")

    def test_format_sorted(self):
        assert format_kv({"b": "2", "a": "1"}) == "a = 1\nb = 2\n"

    def test_onecycle_from_kv(self):
        cfg = onecycle_from_kv(parse_kv("total_steps = 100\nmax_lr = 0.02\nlr.pct_start = 0.5\nignored = x\n"))
        assert cfg == OneCycleConfig(100, max_lr=0.02, pct_start=0.5)
        with pytest.raises(InputError):
            onecycle_from_kv({"max_lr": "0.1"})
        with pytest.raises(InputError):
            onecycle_from_kv({"total_steps": "many"})
