"""
Run configuration: an INI file with [network], [training], [loss], [data]
and [run] sections whose keys are the fields of the matching config classes.
Command-line flags override file values, and the resolved configuration is
echoed to <out>/run.cfg before a command starts working.
"""
import configparser
import dataclasses
import datetime
import logging
import os
import typing
from dataclasses import dataclass, field
from typing import Optional, Tuple

from cmsr import settings
from cmsr.exceptions import InvalidArgument
from cmsr.network import NetworkConfig
from cmsr.training import LossConfig, TrainConfig


log = logging.getLogger(__name__)

ECHO_NAME = 'run.cfg'


@dataclass
class DataConfig:
    manifest: str = ''
    validation: str = ''
    patches: str = 'patches.cmsr'
    augment: Tuple[str, ...] = ()
    patch_size: int = settings.CMSR_PATCH_SIZE
    stride: int = settings.CMSR_PATCH_STRIDE


@dataclass
class RunSection:
    out: str = 'out'
    model: str = 'model.cmsr'
    started: Optional[str] = None


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunSection = field(default_factory=RunSection)

    SECTIONS = ('network', 'training', 'loss', 'data', 'run')

    def section(self, name):
        return getattr(self, name)

    def model_path(self):
        return os.path.join(self.run.out, self.run.model)

    def patches_path(self):
        return os.path.join(self.run.out, self.data.patches)


def _parse(raw, annotation, where):
    origin = typing.get_origin(annotation)
    if origin is typing.Union:
        if raw.strip().lower() in ('', 'none'):
            return None
        annotation = [a for a in typing.get_args(annotation)
                      if a is not type(None)][0]
        origin = typing.get_origin(annotation)
    try:
        if origin is tuple:
            return tuple(part.strip() for part in raw.split(',')
                         if part.strip())
        if annotation is bool:
            lowered = raw.strip().lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(raw)
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        if annotation in (int, float):
            return annotation(raw)
        return raw.strip()
    except ValueError:
        raise InvalidArgument("%s: cannot read %r" % (where, raw))


def _format(value):
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ', '.join(value)
    return str(value)


def _rebuild(section, values, name):
    """Fresh copy of a section dataclass so its validation runs again."""
    try:
        return dataclasses.replace(section, **values)
    except TypeError as e:
        raise InvalidArgument("[%s] %s" % (name, e))


def load_config(path=None, overrides=None):
    """
    Builds a RunConfig from defaults, then the INI file at path (if any),
    then overrides, a mapping of (section, key) -> value where value is
    either a string to parse or an already typed value.
    """
    config = RunConfig()
    changes = dict((name, {}) for name in RunConfig.SECTIONS)

    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        if not parser.read(path):
            raise InvalidArgument("cannot read config file %s" % path)
        for name in parser.sections():
            if name not in changes:
                raise InvalidArgument("%s: unknown section [%s]"
                                      % (path, name))
            types = dict((f.name, f.type) for f in
                         dataclasses.fields(config.section(name)))
            for key, raw in parser.items(name):
                if key not in types:
                    raise InvalidArgument("%s: unknown key %s in [%s]"
                                          % (path, key, name))
                changes[name][key] = _parse(raw, types[key],
                                            "%s [%s] %s" % (path, name, key))

    for (name, key), value in (overrides or {}).items():
        if value is None:
            continue
        types = dict((f.name, f.type) for f in
                     dataclasses.fields(config.section(name)))
        if key not in types:
            raise InvalidArgument("unknown setting %s.%s" % (name, key))
        if isinstance(value, str):
            value = _parse(value, types[key], "%s.%s" % (name, key))
        changes[name][key] = value

    for name in RunConfig.SECTIONS:
        setattr(config, name, _rebuild(config.section(name), changes[name],
                                       name))
    return config


def to_parser(config):
    parser = configparser.ConfigParser(interpolation=None)
    for name in RunConfig.SECTIONS:
        section = config.section(name)
        parser[name] = dict((f.name, _format(getattr(section, f.name)))
                            for f in dataclasses.fields(section))
    return parser


def echo_config(config):
    """
    Stamps config.run.started and writes the resolved configuration to
    <out>/run.cfg. Returns the path written.
    """
    os.makedirs(config.run.out, exist_ok=True)
    config.run.started = datetime.datetime.now().isoformat()
    path = os.path.join(config.run.out, ECHO_NAME)
    with open(path, 'w') as f:
        to_parser(config).write(f)
    log.info("configuration written to %s", path)
    return path
