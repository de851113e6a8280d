# app/config.py
import logging
import os
from dotenv import load_dotenv

load_dotenv()

# Уровень логирования (DEBUG, INFO, WARNING, ...)
LOG_LEVEL = os.getenv("FEDMIG_LOG", "WARNING").upper()

# Общий журнал запусков; если не задан, каждый запуск пишет <out>/ledger.db
LEDGER_PATH = os.getenv("FEDMIG_LEDGER") or None

# Значения по умолчанию
DEFAULT_ROUNDS = 100
DEFAULT_LEARNING_RATE = 0.01
HIDDEN_DIM = 64
FEATURE_DIM = 64          # d_z, выход адаптационного слоя
PROJECTION_DIM = 32
DEFAULT_THRESHOLD = 0.8
DEFAULT_LAMBDA1 = 1.0
DEFAULT_LAMBDA2 = 1e-5
DEFAULT_GAMMA = 0.5
DEFAULT_LOCAL_EPOCHS = 3
DEFAULT_PRE_EPOCHS = 5
DEFAULT_D_STEPS = 1
DEFAULT_TEMPERATURE = 1.0
DEFAULT_SPLIT = (0.6, 0.2, 0.2)
DEFAULT_SIZE_RANGE = (400, 1200)

# Численные константы
PROB_FLOOR = 1e-12
GRAD_CHECK_STEP = 1e-5

# Формат сообщений на проводе: float32 + фиксированный заголовок
WIRE_BYTES_PER_ELEMENT = 4
WIRE_HEADER_BYTES = 64

CHECKPOINT_FORMAT = "fedmig-params"
CHECKPOINT_VERSION = 1

_LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str | None = None) -> None:
    """Настроить корневой логгер по FEDMIG_LOG"""
    name = (level or LOG_LEVEL).upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        numeric = logging.WARNING
    logging.basicConfig(level=numeric, format=_LOG_FORMAT, force=True)
