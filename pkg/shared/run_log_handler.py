from shared.log_data import LoggerType, JSONFormatter
import logging
import os
import bittensor as bt

RUN_LOG_NAME = "run_log.jsonl"

def register_run_log_handler(logger, logger_type: LoggerType, out_dir: str):
    enable_logging = os.environ.get("ENABLE_RUN_LOG", "false").lower() == "true"

    bt.logging.debug(f"Run log enabled:  {enable_logging}")

    if not enable_logging:
        return None

    path = os.path.join(out_dir, RUN_LOG_NAME)
    bt.logging.info(f"Registered run log at:  {path}")

    logger.setLevel(logging.DEBUG)  # Capture all logs
    handler = RunLogHandler(path, logger_type)
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(JSONFormatter(logger_type))

    logger.addHandler(handler)
    return handler


class RunLogHandler(logging.Handler):
    """Appends JSON log lines to a file beside the command's outputs."""

    def __init__(self, path, logger_type: LoggerType):
        super().__init__()
        self.path = path
        self.logger_type = logger_type

    def emit(self, record):
        log_entry = self.format(record)
        try:
            with open(self.path, "a") as f:
                f.write(log_entry + "\n")
        except OSError as e:
            # Not using bittensor logging here - otherwise we will go into a loop!
            print(f"Failed to write run log: {e}")
