# app/errors.py


class FedMigError(Exception):
    """Базовая ошибка симулятора"""


class ShapeError(FedMigError):
    """Несовпадение размерностей тензоров"""


class StructuralError(FedMigError):
    """Нарушение структуры графа или набора данных"""


class ParseError(FedMigError):
    """Некорректная строка во входном CSV"""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class ConfigurationError(FedMigError, ValueError):
    """Недопустимая конфигурация или предусловие операции"""


class NumericError(FedMigError):
    """Нечисловое значение (NaN/Inf) там, где ожидалось конечное"""


class TrainingError(FedMigError):
    """Нечисловая функция потерь во время обучения"""

    def __init__(self, message: str, component: str):
        self.component = component
        super().__init__(f"{message} (компонента: {component})")


class ProtocolError(FedMigError):
    """Нарушение протокола раунда"""
