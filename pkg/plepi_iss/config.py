from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """
    应用配置管理

    使用环境变量或.env文件配置进程级参数；实验参数见 models.RunConfig
    """

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="PLEPI_",
        case_sensitive=True,
        extra="ignore",
    )

    # 基础配置
    APP_NAME: str = "PLePI-ISS"
    APP_VERSION: str = "0.3.0"
    DEBUG: bool = False

    # 运行配置
    DEFAULT_THREADS: int = 1
    OUTPUT_DIR: str = "runs/default"

    # 日志配置
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    LOG_FILE: Optional[str] = None

    def get_log_config(self):
        """获取日志配置"""
        handlers = {
            "console": {
                "class": "logging.StreamHandler",
                "formatter": "default",
                "stream": "ext://sys.stderr"
            }
        }
        if self.LOG_FILE:
            handlers["file"] = {
                "class": "logging.FileHandler",
                "formatter": "default",
                "filename": self.LOG_FILE,
                "encoding": "utf-8"
            }
        return {
            "version": 1,
            "disable_existing_loggers": False,
            "formatters": {
                "default": {
                    "format": self.LOG_FORMAT
                }
            },
            "handlers": handlers,
            "root": {
                "level": "DEBUG" if self.DEBUG else self.LOG_LEVEL,
                "handlers": list(handlers)
            }
        }


# 创建全局配置实例
settings = Settings()
