"""
Command-line front end: flag definitions, config merging and command dispatch.

The `lm` management command and `run(argv)` share everything in this module.
"""
import json
import logging
import os
import sys
import uuid
from typing import Dict, List, Optional, TextIO

from .exceptions import ConfigValidationError, format_error

logger = logging.getLogger(__name__)

# (flag, argparse keyword arguments); the destination doubles as the run-config key.
FLAGS = [
    ("--train", {"nargs": "+", "help": "Training text file(s), one sentence per line"}),
    ("--dev", {"help": "Development text file"}),
    ("--test", {"help": "Test text file"}),
    ("--vocab", {"help": "Vocabulary file"}),
    ("--counts", {"help": "Count file"}),
    ("--model", {"help": "ARPA file or checkpoint to evaluate"}),
    ("--output", {"help": "Output path of the command's artifact"}),
    ("--report", {"help": "Path of the JSON report"}),
    ("--word-list", {"dest": "word_list", "help": "Fixed word list for the vocabulary"}),
    ("--max-size", {"dest": "max_size", "type": int, "help": "Keep the most frequent words only"}),
    ("--order", {"type": int, "help": "n-gram order"}),
    ("--boundary", {"choices": ["independent", "straddle"], "help": "Sentence boundary mode"}),
    ("--padded", {"action": "store_true", "default": None, "help": "Count padded windows in hit ratios"}),
    ("--workers", {"type": int, "help": "Count in this many parallel shards"}),
    ("--smoothing", {"help": "katz, kn or kneser_ney_interpolated"}),
    ("--gt-max", {"dest": "gt_max", "type": int, "help": "Largest count Katz discounts"}),
    ("--regime", {"choices": ["onehot", "multinomial", "weighted"], "help": "Training target regime"}),
    ("--variant", {"help": "forward, reverse, stacked, stacked-reverse, bidir or incremental"}),
    ("--decay", {"type": float, "help": "Decay of the incremental loss"}),
    ("--family", {"choices": ["ff", "rnn", "lstm"], "help": "Neural n-gram family"}),
    ("--layers", {"type": int}),
    ("--dim-embed", {"dest": "dim_embed", "type": int}),
    ("--dim-state", {"dest": "dim_state", "type": int}),
    ("--dim-proj", {"dest": "dim_proj", "type": int, "help": "LSTM projection width"}),
    ("--keep-prob", {"dest": "keep_prob", "type": float, "help": "Dropout keep probability"}),
    ("--optimizer", {"choices": ["adagrad", "sgd"]}),
    ("--lr", {"type": float, "help": "Learning rate"}),
    ("--initial-accumulator", {"dest": "initial_accumulator", "type": float}),
    ("--constant-epochs", {"dest": "constant_epochs", "type": int}),
    ("--decay-epochs", {"dest": "decay_epochs", "type": int}),
    ("--clip-norm", {"dest": "clip_norm", "type": float, "help": "Global gradient norm bound"}),
    ("--init-stddev", {"dest": "init_stddev", "type": float}),
    ("--epochs", {"type": int}),
    ("--batch-size", {"dest": "batch_size", "type": int}),
    ("--eval-batch-size", {"dest": "eval_batch_size", "type": int}),
    ("--seed", {"type": int}),
    ("--deterministic", {"action": "store_true", "default": None}),
    ("--float", {"type": int, "choices": [32, 64], "help": "Float width of model arrays"}),
    ("--segment-length", {"dest": "segment_length", "type": int, "help": "BPTT segment length"}),
    ("--batch", {"type": int, "help": "Parallel streams of the recurrent baseline"}),
    ("--reset-at-bos", {"dest": "reset_at_bos", "action": "store_true", "default": None}),
    ("--carry-state", {"dest": "reset_at_bos", "action": "store_false", "default": None, "help": "Never reset state"}),
    ("--submit", {"action": "store_true", "default": None, "help": "Run as a background job"}),
    ("--task-id", {"dest": "task_id", "help": "Run to report with `status`"}),
]


def flag_dest(flag: str, options: Dict) -> str:
    return options.get("dest", flag[2:].replace("-", "_"))


RUN_FIELDS = [flag_dest(flag, options) for flag, options in FLAGS]


def add_arguments(parser) -> None:
    from .serializers import COMMANDS

    parser.add_argument("command", choices=COMMANDS, help="Pipeline step to run")
    parser.add_argument("--config", dest="config_file", help="JSON file of run settings")
    for flag, options in FLAGS:
        parser.add_argument(flag, **options)


def load_config_file(path: str) -> Dict:
    try:
        with open(path, encoding="utf-8") as handle:
            data = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ConfigValidationError(
            f"Config file {path} is not valid JSON (line {exc.lineno})",
            {"config": [exc.msg]},
        ) from exc
    if not isinstance(data, dict):
        raise ConfigValidationError(f"Config file {path} must hold a JSON object", {"config": ["Not an object."]})
    return data


def merge_run_config(options: Dict) -> Dict:
    """
    Config-file settings overlaid by every flag given on the command line.
    """
    merged = {}
    if options.get("config_file"):
        merged.update(load_config_file(options["config_file"]))
    for name in RUN_FIELDS:
        if options.get(name) is not None:
            merged[name] = options[name]
    merged["command"] = options["command"]
    return merged


def submit(run: Dict) -> Dict:
    """Create a tracked run and hand it to a Celery worker."""
    from .services import ExperimentService
    from .tasks import execute_run

    task_id = str(uuid.uuid4())
    total_epochs = run["epochs"] if run["command"] in ("train-nn", "train-recurrent") else 0
    experiment = ExperimentService.create_run(task_id, run["command"], run, total_epochs)
    execute_run.apply_async(args=[run], task_id=task_id)
    logger.info(f"Submitted run {task_id} for '{run['command']}'")
    return {"task_id": experiment.task_id, "status": experiment.status, "command": run["command"]}


def execute(options: Dict, stdout: TextIO, stderr: TextIO) -> int:
    """
    Validate and run one command, writing a single JSON line to stdout.

    Returns:
        The process exit status; failures print one JSON error record to stderr
    """
    from .serializers import validate_run_config
    from .services import PipelineService

    try:
        run = validate_run_config(merge_run_config(options))
        if run["submit"] and run["command"] != "status":
            payload = submit(run)
        elif run["command"] == "eval":
            report = PipelineService.evaluate(run)
            if run.get("report"):
                stderr.write(report.to_table() + "\n")
            payload = report.to_dict()
        else:
            payload = PipelineService.run_command(run)
    except Exception as exc:
        error = format_error(exc)
        if error["code"] == "internal_error":
            logger.error(f"Command '{options.get('command')}' failed", exc_info=True)
        stderr.write(json.dumps(error, sort_keys=True) + "\n")
        return error["exit_code"]

    stdout.write(json.dumps(payload, sort_keys=True, default=str) + "\n")
    return 0


def run(argv: List[str], stdout: Optional[TextIO] = None, stderr: Optional[TextIO] = None) -> int:
    """
    Run the toolkit as `lm <command> [flags]` and return the exit status.
    """
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "config.settings")
    import django
    from django.core.management.base import CommandError

    django.setup()
    from .management.commands.lm import Command

    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = Command().create_parser("manage.py", "lm")
    try:
        options = vars(parser.parse_args(argv))
    except CommandError as exc:
        error = format_error(ConfigValidationError(str(exc)))
        stderr.write(json.dumps(error, sort_keys=True) + "\n")
        return error["exit_code"]
    except SystemExit as exc:
        return exc.code or 0
    return execute(options, stdout, stderr)


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
