from dataclasses import asdict, dataclass
from enum import Enum
import json
import logging


class LoggerType(Enum):
    GenData = "GEN_DATA"
    Pretrain = "PRETRAIN"
    Stage1 = "STAGE1"
    Stage2 = "STAGE2"
    Eval = "EVAL"
    SameDiff = "SAMEDIFF"
    Ablate = "ABLATE"
    Embed = "EMBED"


@dataclass
class LogEntry:
    timestamp: float
    logger: str
    stage: str
    level: str
    context: str
    message: str
    module: str
    lineno: int

    def to_dict(self):
        return asdict(self)


def split_context(message: str):
    """'stage1 | step 3 | loss 0.4' -> ('stage1', 'step 3 | loss 0.4'); no prefix gives ''."""
    head, sep, rest = message.partition(" | ")
    if not sep or " " in head:
        return "", message
    return head, rest


class JSONFormatter(logging.Formatter):
    def __init__(self, logger_type: LoggerType):
        super().__init__()
        self.logger_type = logger_type

    def format(self, record):
        context, message = split_context(record.getMessage())
        log_entry = LogEntry(
            timestamp=record.created,
            logger=record.name,
            stage=self.logger_type.value,
            level=record.levelname,
            context=context,
            message=message,
            module=record.module,
            lineno=record.lineno,
        )
        return json.dumps(log_entry.to_dict())
