import sys
import time
import logging
from functools import wraps
from typing import Callable

from pydantic import ValidationError

from plepi_iss.utils.exceptions import ConfigError, PLePIError
from plepi_iss.utils.helpers import format_error_message

logger = logging.getLogger(__name__)

CommandHandler = Callable[..., int]


def command_logging(name: str) -> Callable[[CommandHandler], CommandHandler]:
    """
    子命令日志包装

    记录子命令开始、结束、耗时与失败
    """

    def decorator(handler: CommandHandler) -> CommandHandler:
        @wraps(handler)
        def wrapper(*args, **kwargs) -> int:
            start_time = time.time()
            logger.info(f"Command: {name}")
            try:
                code = handler(*args, **kwargs)
                duration = time.time() - start_time
                logger.info(f"Command: {name} - Exit: {code} - Duration: {duration:.3f}s")
                return code
            except Exception as e:
                duration = time.time() - start_time
                logger.error(f"Error: {name} - Exception: {str(e)} - Duration: {duration:.3f}s")
                raise

        return wrapper

    return decorator


def error_handler(handler: CommandHandler) -> CommandHandler:
    """
    全局错误处理

    把异常映射为退出码并向 stderr 输出一行诊断：
    配置错误 2，数据错误 3，数值错误 4，未预期异常 1
    """

    @wraps(handler)
    def wrapper(*args, **kwargs) -> int:
        try:
            return handler(*args, **kwargs)
        except PLePIError as e:
            print(format_error_message(str(e), e.exit_code), file=sys.stderr)
            return e.exit_code
        except ValidationError as e:
            code = ConfigError.exit_code
            print(format_error_message(f"配置校验失败: {e}", code), file=sys.stderr)
            return code
        except Exception as e:
            logger.error(f"Unhandled exception: {str(e)}", exc_info=True)
            print(format_error_message(f"内部错误: {e}", 1), file=sys.stderr)
            return 1

    return wrapper
