"""
`manage.py lm <command>`: the n-gram language modeling pipeline.
"""
from django.core.management.base import BaseCommand, CommandError

from apps.lm.cli import add_arguments, execute


class Command(BaseCommand):
    help = (
        "Build vocabularies and counts, train back-off, neural n-gram and recurrent "
        "models, evaluate them and report n-gram hit ratios."
    )

    def add_arguments(self, parser):
        add_arguments(parser)

    def handle(self, *args, **options):
        status = execute(options, self.stdout, self.stderr)
        if status:
            raise CommandError(f"lm {options['command']} failed", returncode=status)
