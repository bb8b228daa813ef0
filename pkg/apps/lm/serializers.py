"""
Serializers validating CLI run configurations and rendering run status.
"""
from django.conf import settings
from rest_framework import serializers

from .backoff import Smoothing
from .corpus import BoundaryMode
from .exceptions import ConfigValidationError
from .models import EpochRecord, ExperimentRun
from .neural_ngram import EncodingVariant, ModelFamily, NGramModelConfig
from .ngram_stats import TargetRegime
from .nn_core import OptimizerConfig, OptimizerKind
from .recurrent import RecurrentConfig, StatePolicy

COMMANDS = [
    "vocab",
    "counts",
    "train-backoff",
    "train-nn",
    "train-recurrent",
    "eval",
    "hit-ratio",
    "status",
]

SMOOTHING_ALIASES = {
    "katz": Smoothing.KATZ,
    "kn": Smoothing.KNESER_NEY,
    Smoothing.KNESER_NEY.value: Smoothing.KNESER_NEY,
}

VARIANT_ALIASES = {
    "forward": EncodingVariant.FORWARD,
    "reverse": EncodingVariant.REVERSE,
    "stacked": EncodingVariant.STACKED_FORWARD,
    "stacked-reverse": EncodingVariant.STACKED_REVERSE,
    "bidir": EncodingVariant.BIDIRECTIONAL,
    "incremental": EncodingVariant.INCREMENTAL_DECAY,
}
VARIANT_ALIASES.update({value: EncodingVariant(value) for value in EncodingVariant.values})

# Inputs each command cannot run without.
REQUIRED_FIELDS = {
    "vocab": ["train", "output"],
    "counts": ["train", "vocab", "output", "order"],
    "train-backoff": ["vocab", "output", "order"],
    "train-nn": ["train", "dev", "vocab", "output", "order"],
    "train-recurrent": ["train", "dev", "vocab", "output"],
    "eval": ["model", "test"],
    "hit-ratio": ["test", "vocab", "order"],
    "status": ["task_id"],
}

SETTINGS_DEFAULTS = {
    "seed": "LM_DEFAULT_SEED",
    "float": "LM_FLOAT_WIDTH",
    "gt_max": "LM_KATZ_GT_MAX",
    "clip_norm": "LM_CLIP_NORM",
    "init_stddev": "LM_INIT_STDDEV",
    "batch_size": "LM_BATCH_SIZE",
    "eval_batch_size": "LM_EVAL_BATCH_SIZE",
    "initial_accumulator": "LM_ADAGRAD_INITIAL_ACCUMULATOR",
    "constant_epochs": "LM_SGD_CONSTANT_EPOCHS",
    "decay_epochs": "LM_SGD_DECAY_EPOCHS",
}


class RunConfigSerializer(serializers.Serializer):
    """
    Validates one CLI invocation (config file merged with flags).

    Unknown fields are rejected; unset tuning fields fall back to the LM_* settings.
    """

    command = serializers.ChoiceField(choices=COMMANDS)

    # Paths
    train = serializers.ListField(child=serializers.CharField(), required=False, min_length=1)
    dev = serializers.CharField(required=False)
    test = serializers.CharField(required=False)
    vocab = serializers.CharField(required=False)
    counts = serializers.CharField(required=False)
    model = serializers.CharField(required=False)
    output = serializers.CharField(required=False)
    report = serializers.CharField(required=False)
    word_list = serializers.CharField(required=False)

    # Data
    max_size = serializers.IntegerField(required=False, min_value=1)
    order = serializers.IntegerField(required=False, min_value=1, max_value=64)
    boundary = serializers.ChoiceField(choices=BoundaryMode.values, default=BoundaryMode.SENTENCE_INDEPENDENT)
    padded = serializers.BooleanField(default=False)
    workers = serializers.IntegerField(default=1, min_value=1)

    # Back-off
    smoothing = serializers.ChoiceField(choices=sorted(SMOOTHING_ALIASES), default="kn")
    gt_max = serializers.IntegerField(required=False, min_value=1)

    # Neural n-gram
    family = serializers.ChoiceField(choices=ModelFamily.values, default=ModelFamily.LSTM)
    regime = serializers.ChoiceField(choices=TargetRegime.values, default=TargetRegime.ONE_HOT)
    variant = serializers.ChoiceField(choices=sorted(VARIANT_ALIASES), default="forward")
    decay = serializers.FloatField(default=0.0, min_value=0.0)
    layers = serializers.IntegerField(default=1, min_value=1)
    dim_embed = serializers.IntegerField(default=128, min_value=1)
    dim_state = serializers.IntegerField(default=128, min_value=1)
    dim_proj = serializers.IntegerField(required=False, min_value=1)
    keep_prob = serializers.FloatField(default=1.0, min_value=0.0, max_value=1.0)

    # Optimization
    optimizer = serializers.ChoiceField(choices=OptimizerKind.values, default=OptimizerKind.ADAGRAD)
    lr = serializers.FloatField(required=False, min_value=0.0)
    initial_accumulator = serializers.FloatField(required=False, min_value=0.0)
    constant_epochs = serializers.IntegerField(required=False, min_value=0)
    decay_epochs = serializers.IntegerField(required=False, min_value=1)
    clip_norm = serializers.FloatField(required=False)
    init_stddev = serializers.FloatField(required=False)
    epochs = serializers.IntegerField(default=1, min_value=1)
    batch_size = serializers.IntegerField(required=False, min_value=1)
    eval_batch_size = serializers.IntegerField(required=False, min_value=1)
    seed = serializers.IntegerField(required=False, min_value=0)
    deterministic = serializers.BooleanField(default=False)
    float = serializers.ChoiceField(choices=[32, 64], required=False)

    # Recurrent baseline
    segment_length = serializers.IntegerField(default=35, min_value=1)
    batch = serializers.IntegerField(default=20, min_value=1)
    # Unset: training carries state; evaluation uses the checkpoint's policy.
    reset_at_bos = serializers.BooleanField(default=None, allow_null=True)

    # Orchestration
    submit = serializers.BooleanField(default=False)
    task_id = serializers.CharField(required=False)

    def to_internal_value(self, data):
        unknown = sorted(set(data) - set(self.fields))
        if unknown:
            raise serializers.ValidationError({name: ["Unknown field."] for name in unknown})
        if isinstance(data.get("train"), str):
            data = dict(data, train=[data["train"]])
        return super().to_internal_value(data)

    def validate_keep_prob(self, value):
        """Keep probability must lie in (0, 1]."""
        if value <= 0.0:
            raise serializers.ValidationError("Keep probability must be greater than 0")
        return value

    def validate_clip_norm(self, value):
        if value <= 0:
            raise serializers.ValidationError("Clip norm must be positive")
        return value

    def validate_init_stddev(self, value):
        if value <= 0:
            raise serializers.ValidationError("Initialization stddev must be positive")
        return value

    def validate(self, attrs):
        """Apply settings defaults, canonical tags and per-command requirements."""
        for field_name, setting in SETTINGS_DEFAULTS.items():
            if attrs.get(field_name) is None:
                attrs[field_name] = getattr(settings, setting)
        if attrs.get("lr") is None:
            attrs["lr"] = settings.LM_ADAGRAD_LR if attrs["optimizer"] == OptimizerKind.ADAGRAD else 1.0

        attrs["smoothing"] = SMOOTHING_ALIASES[attrs["smoothing"]].value
        attrs["variant"] = VARIANT_ALIASES[attrs["variant"]].value

        command = attrs["command"]
        missing = [name for name in REQUIRED_FIELDS[command] if attrs.get(name) is None]
        if command == "train-backoff" and attrs.get("counts") is None and attrs.get("train") is None:
            missing.append("counts")
        if command == "hit-ratio" and attrs.get("counts") is None and attrs.get("train") is None:
            missing.append("train")
        if missing:
            raise serializers.ValidationError(
                {name: [f"This field is required for '{command}'."] for name in missing}
            )

        if command == "train-nn":
            if attrs["order"] < 2:
                raise serializers.ValidationError({"order": ["Neural n-gram models need order >= 2."]})
            if attrs["family"] != ModelFamily.LSTM and attrs["variant"] != EncodingVariant.FORWARD:
                raise serializers.ValidationError(
                    {"variant": [f"Family '{attrs['family']}' supports the forward variant only."]}
                )
            if (
                attrs["variant"] == EncodingVariant.INCREMENTAL_DECAY
                and attrs["regime"] != TargetRegime.ONE_HOT
            ):
                raise serializers.ValidationError(
                    {"regime": ["incremental_decay is restricted to one-hot targets."]}
                )
        return attrs


def validate_run_config(data: dict) -> dict:
    """
    Validate a merged run configuration.

    Raises:
        ConfigValidationError: With the serializer's field errors
    """
    serializer = RunConfigSerializer(data=data)
    if not serializer.is_valid():
        errors = {field: [str(message) for message in messages] for field, messages in serializer.errors.items()}
        summary = "; ".join(f"{field}: {' '.join(messages)}" for field, messages in sorted(errors.items()))
        raise ConfigValidationError(f"Invalid run configuration ({summary})", errors)
    return dict(serializer.validated_data)


def optimizer_config(run: dict) -> OptimizerConfig:
    return OptimizerConfig(
        kind=run["optimizer"],
        learning_rate=run["lr"],
        initial_accumulator=run["initial_accumulator"],
        constant_epochs=run["constant_epochs"],
        decay_epochs=run["decay_epochs"],
        clip_norm=run["clip_norm"],
    )


def neural_config(run: dict) -> NGramModelConfig:
    return NGramModelConfig(
        family=run["family"],
        order=run["order"],
        dim_embed=run["dim_embed"],
        dim_state=run["dim_state"],
        layers=run["layers"],
        dim_proj=run.get("dim_proj"),
        keep_prob=run["keep_prob"],
        variant=run["variant"],
        decay=run["decay"],
        regime=run["regime"],
        optimizer=optimizer_config(run),
        init_stddev=run["init_stddev"],
        epochs=run["epochs"],
        batch_size=run["batch_size"],
        eval_batch_size=run["eval_batch_size"],
        boundary_mode=run["boundary"],
        seed=run["seed"],
        float_width=run["float"],
    )


def recurrent_config(run: dict) -> RecurrentConfig:
    return RecurrentConfig(
        dim_embed=run["dim_embed"],
        dim_state=run["dim_state"],
        layers=run["layers"],
        dim_proj=run.get("dim_proj"),
        keep_prob=run["keep_prob"],
        optimizer=optimizer_config(run),
        init_stddev=run["init_stddev"],
        epochs=run["epochs"],
        segment_length=run["segment_length"],
        batch_size=run["batch"],
        policy=(
            StatePolicy.RESET_AT_SENTENCE_START if run["reset_at_bos"] else StatePolicy.CARRY_FOREVER
        ),
        seed=run["seed"],
        float_width=run["float"],
    )


class EpochRecordSerializer(serializers.ModelSerializer):
    class Meta:
        model = EpochRecord
        fields = ["epoch", "train_xent", "dev_ppl", "lr"]
        read_only_fields = fields


class ExperimentRunStatusSerializer(serializers.ModelSerializer):
    """
    Serializes an experiment run for the `status` command.
    """

    progress_percentage = serializers.IntegerField(read_only=True)
    duration = serializers.FloatField(read_only=True)
    epochs = EpochRecordSerializer(many=True, read_only=True)

    class Meta:
        model = ExperimentRun
        fields = [
            "task_id",
            "command",
            "status",
            "output_path",
            "total_epochs",
            "epochs_completed",
            "progress_percentage",
            "best_dev_ppl",
            "best_epoch",
            "result",
            "error_message",
            "created_at",
            "started_at",
            "completed_at",
            "duration",
            "epochs",
        ]
        read_only_fields = fields
