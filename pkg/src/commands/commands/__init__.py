"""Imports every command module here so its @register_command runs."""
import importlib
import logging
import pkgutil

logger = logging.getLogger(__name__)

COMMAND_MODULES = sorted(m.name for m in pkgutil.iter_modules(__path__) if not m.name.startswith("_"))

for _name in COMMAND_MODULES:
    importlib.import_module(f"{__name__}.{_name}")

logger.debug(f"Loaded command modules: {', '.join(COMMAND_MODULES)}")
