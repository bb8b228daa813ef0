"""
Unit tests for run-configuration validation and status serialization.
"""
import pytest
from django.test import override_settings

from apps.lm.exceptions import ConfigValidationError
from apps.lm.serializers import (
    ExperimentRunStatusSerializer,
    neural_config,
    recurrent_config,
    validate_run_config,
)


class TestValidateRunConfig:
    """Tests for validate_run_config."""

    def test_valid_train_backoff(self):
        """Test defaults and the kn alias on a minimal back-off run."""
        run = validate_run_config(
            {"command": "train-backoff", "train": "train.txt", "vocab": "v.txt", "output": "m.arpa", "order": 3}
        )

        assert run["train"] == ["train.txt"]
        assert run["smoothing"] == "kneser_ney_interpolated"
        assert run["boundary"] == "independent"
        assert run["workers"] == 1

    def test_settings_defaults(self):
        run = validate_run_config({"command": "status", "task_id": "abc"})

        assert run["seed"] == 1234
        assert run["float"] == 64
        assert run["gt_max"] == 5
        assert run["lr"] == 0.1
        assert run["decay_epochs"] == 9

    @override_settings(LM_DEFAULT_SEED=99)
    def test_settings_override(self):
        assert validate_run_config({"command": "status", "task_id": "abc"})["seed"] == 99

    def test_sgd_default_rate(self):
        run = validate_run_config({"command": "status", "task_id": "abc", "optimizer": "sgd"})

        assert run["lr"] == 1.0

    def test_unknown_field(self):
        """Test that misspelled settings are rejected rather than ignored."""
        with pytest.raises(ConfigValidationError) as exc_info:
            validate_run_config({"command": "status", "task_id": "abc", "epoch": 3})

        assert exc_info.value.errors == {"epoch": ["Unknown field."]}
        assert exc_info.value.exit_code == 2

    def test_missing_required_fields(self):
        with pytest.raises(ConfigValidationError) as exc_info:
            validate_run_config({"command": "train-nn", "train": ["t.txt"]})

        assert set(exc_info.value.errors) == {"dev", "vocab", "output", "order"}

    def test_backoff_needs_counts_or_train(self):
        with pytest.raises(ConfigValidationError) as exc_info:
            validate_run_config({"command": "train-backoff", "vocab": "v.txt", "output": "m.arpa", "order": 3})

        assert "counts" in exc_info.value.errors

    @pytest.mark.parametrize(
        "overrides, field",
        [
            ({"keep_prob": 0.0}, "keep_prob"),
            ({"keep_prob": 1.5}, "keep_prob"),
            ({"clip_norm": 0.0}, "clip_norm"),
            ({"order": 1}, "order"),
            ({"family": "rnn", "variant": "bidir"}, "variant"),
            ({"variant": "incremental", "regime": "weighted"}, "regime"),
            ({"smoothing": "witten-bell"}, "smoothing"),
            ({"float": 16}, "float"),
        ],
    )
    def test_invalid_neural_settings(self, overrides, field):
        data = {"command": "train-nn", "train": ["t"], "dev": "d", "vocab": "v", "output": "o", "order": 3}
        data.update(overrides)

        with pytest.raises(ConfigValidationError) as exc_info:
            validate_run_config(data)

        assert field in exc_info.value.errors

    def test_variant_aliases(self):
        data = {"command": "train-nn", "train": ["t"], "dev": "d", "vocab": "v", "output": "o", "order": 4}

        assert validate_run_config(dict(data, variant="bidir"))["variant"] == "bidirectional"
        assert validate_run_config(dict(data, variant="stacked-reverse"))["variant"] == "stacked_reverse"


class TestConfigBuilders:
    """Tests for the model configuration builders."""

    @pytest.fixture
    def base(self):
        return {"train": ["t"], "dev": "d", "vocab": "v", "output": "o"}

    def test_neural_config(self, base):
        run = validate_run_config(
            dict(base, command="train-nn", order=5, family="lstm", variant="incremental", decay=0.5, layers=2)
        )

        config = neural_config(run)

        assert config.order == 5
        assert config.variant == "incremental_decay"
        assert config.decay == 0.5
        assert config.optimizer.learning_rate == 0.1
        assert config.optimizer.initial_accumulator == 0.1

    def test_recurrent_config(self, base):
        run = validate_run_config(dict(base, command="train-recurrent", reset_at_bos=True, batch=4, segment_length=7))

        config = recurrent_config(run)

        assert config.policy == "reset_at_sentence_start"
        assert config.batch_size == 4
        assert config.segment_length == 7

    def test_state_policy_unset_by_default(self, base):
        run = validate_run_config(dict(base, command="train-recurrent"))

        assert run["reset_at_bos"] is None
        assert recurrent_config(run).policy == "carry_forever"

    def test_state_policy_can_be_turned_off(self):
        run = validate_run_config({"command": "eval", "model": "m", "test": "t", "reset_at_bos": False})

        assert run["reset_at_bos"] is False


@pytest.mark.django_db
class TestExperimentRunStatusSerializer:
    def test_serializes_epochs(self, completed_experiment_run):
        data = ExperimentRunStatusSerializer(completed_experiment_run).data

        assert data["status"] == "COMPLETED"
        assert data["progress_percentage"] == 100
        assert [epoch["dev_ppl"] for epoch in data["epochs"]] == [12.0, 9.5, 10.25]
