import os
import re
from typing import Any, Dict, List, Sequence

import pyaml
import yaml
from braceexpand import braceexpand
from wcmatch import wcmatch
from yamllint import linter
from yamllint.config import YamlLintConfig

from .logger import logger

# Folder exclude patterns separated by |
GLOB_EXCLUDES = ".git|__pycache__"
MESH_PATTERNS = "*.obj|*.OBJ"
LINT_CONFIG = YamlLintConfig("extends: relaxed")


def expand_flexi_environment_variables(before_expansion: str) -> str:
    """
    Expands any environment variable that starts with FLEXI_.
    Support syntax: ${FLEXI_FOO} and ${FLEXI_FOO:-default}
    """

    def replacer(match):
        groups = match.groupdict()
        key = groups["key"]
        default_value = groups["default"]
        replacement = os.getenv(key, default_value)
        assert replacement, f"Did not find environment variable {key} or default value"
        return replacement

    pattern = re.compile(r"[$]{(?P<key>FLEXI_[A-Z\d_]*)(?:[:]-(?P<default>[A-z\.\d,:-]*))?}")

    after_expansion = pattern.sub(replacer, before_expansion)

    assert (
        "FLEXI_" not in after_expansion
    ), "The configuration contained something that looked liked an faulty FLEXI_ environment variable expansion"

    return after_expansion


def lint_config(raw_config: str, path: str) -> None:
    errors = []
    for problem in linter.run(raw_config, LINT_CONFIG):
        text = f"{path}:{problem.line}:{problem.column}: {problem.message}"
        if problem.level == "error":
            errors.append(text)
        else:
            logger.debug(f"yamllint {text}")
    if errors:
        raise ValueError("Invalid run configuration:\n" + "\n".join(errors))


def get_config(path: str) -> Dict[str, Any]:
    """Reads a YAML run configuration: lint, expand FLEXI_ variables, then parse"""
    try:
        with open(path) as f:
            raw_config = f.read()
    except FileNotFoundError:
        raise ValueError(f"Run configuration {path} not found")
    lint_config(raw_config, path)
    expanded_config = expand_flexi_environment_variables(raw_config)
    config = yaml.load(expanded_config, Loader=yaml.FullLoader)
    if config is None:
        return {}
    if not isinstance(config, dict):
        raise ValueError(f"Expected a mapping in {path}, got {type(config).__name__}")
    return config


def write_config(config: Dict[str, Any], path: str) -> None:
    with open(path, "w") as f:
        f.write(pyaml.dump(config))
    logger.debug(f"Wrote resolved configuration to {path}")


def expand_targets(specs: Sequence[str]) -> List[str]:
    """
    Target specs after bash-style brace expansion; a directory stands for
    every mesh file below it.
    """
    ret = []
    for spec in specs:
        for expanded in braceexpand(spec):
            if os.path.isdir(expanded):
                matcher = wcmatch.WcMatch(expanded, MESH_PATTERNS, GLOB_EXCLUDES, flags=wcmatch.RECURSIVE)
                matches = sorted(matcher.match())
                if not matches:
                    raise ValueError(f"No mesh files found in {expanded}")
                logger.debug(f"Found {len(matches)} mesh(es) in {expanded}")
                ret.extend(matches)
            else:
                ret.append(expanded)
    return ret


def ensure_output_dir(path: str) -> str:
    """Creates the directory if needed; raises OSError when it cannot be written"""
    os.makedirs(path, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"Output directory {path} is not writable")
    return path


def target_slug(spec: str) -> str:
    """File-system friendly name of a target spec"""
    base = spec.split(":", 1)[1] if spec.startswith("builtin:") else os.path.splitext(os.path.basename(spec))[0]
    return re.sub(r"[^A-Za-z0-9_.-]", "_", base)
