"""
JSON-line events for completed fits and Monte-Carlo verifications.

Each event is checked against its schema in ``event-schemas/`` before it is
written, one JSON object per line, to the configured sinks.
"""
from datetime import datetime, timezone
from glob import glob
import json
import logging
import os

import jsonschema
from pythonjsonlogger import jsonlogger
from traitlets import Callable, Unicode
from traitlets.config import LoggingConfigurable

SCHEMA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'event-schemas')

# set by emit() on every capsule
CAPSULE_FIELDS = ('timestamp', 'schema', 'version')


def load_schemas(schema_dir=SCHEMA_DIR):
    """Read every event schema in `schema_dir`, keyed by ($id, version)"""
    schemas = {}
    for path in sorted(glob(os.path.join(schema_dir, '*.json'))):
        with open(path) as f:
            schema = json.load(f)
        # SchemaError for a malformed schema
        jsonschema.validators.validator_for(schema).check_schema(schema)
        if '$id' not in schema or 'version' not in schema:
            raise ValueError(f'{path}: event schemas need $id and version')
        clash = set(CAPSULE_FIELDS) & set(schema.get('properties', {}))
        if clash:
            raise ValueError(f'{path}: {", ".join(sorted(clash))} is set by the event capsule')
        schemas[(schema['$id'], schema['version'])] = schema
    return schemas


def _without_message(record, **kwargs):
    # the formatter always adds an empty 'message'
    record.pop('message', None)
    return json.dumps(record, **kwargs)


class EventLog(LoggingConfigurable):
    """
    Validate ebcbf/fit and ebcbf/mc-verify events and write them as JSON lines
    """
    events_file = Unicode(
        '',
        config=True,
        help="""
        Append events to this JSON-lines file.

        Empty (the default) writes no file.
        """
    )

    handlers_maker = Callable(
        None,
        config=True,
        allow_none=True,
        help="""
        Callable taking the EventLog and returning extra logging.Handler sinks.
        """
    )

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        self.schemas = load_schemas()
        self.sink = logging.getLogger('ebcbf.events')
        # events stay out of the application log
        self.sink.propagate = False
        self.sink.setLevel(logging.INFO)

        self.handlers = []
        if self.events_file:
            self.handlers.append(logging.FileHandler(self.events_file))
        if self.handlers_maker:
            self.handlers.extend(self.handlers_maker(self))
        formatter = jsonlogger.JsonFormatter(json_serializer=_without_message)
        for handler in self.handlers:
            handler.setFormatter(formatter)
            self.sink.addHandler(handler)

    def close(self):
        """Detach and close every sink"""
        for handler in self.handlers:
            self.sink.removeHandler(handler)
            handler.close()
        self.handlers = []

    def emit(self, schema_name, version, event):
        """
        Validate `event` and write it with a timestamp, schema and version.

        Raises ValueError for an unknown schema and
        jsonschema.ValidationError when the event does not match it.
        """
        if (schema_name, version) not in self.schemas:
            raise ValueError(f'no event schema {schema_name} version {version}')
        jsonschema.validate(event, self.schemas[(schema_name, version)])
        if not self.handlers:
            return

        capsule = {
            'timestamp': datetime.now(timezone.utc).isoformat().replace('+00:00', 'Z'),
            'schema': schema_name,
            'version': version,
        }
        capsule.update(event)
        self.sink.info(capsule)
