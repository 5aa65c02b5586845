import argparse
import logging.config
import sys
from typing import List, Optional

from dotenv import load_dotenv

from plepi_iss.commands import codebook, evaluation, simulation, training
from plepi_iss.config import settings
from plepi_iss.middleware.middleware import error_handler

# 加载环境变量
load_dotenv()


def build_parser() -> argparse.ArgumentParser:
    """
    创建命令行解析器
    """
    parser = argparse.ArgumentParser(
        prog="plepi-iss",
        description="基于特权信息增强伪标签的 ISS 条形码识别：合成、标注、自训练、解码与评估。",
    )
    parser.add_argument("--version", action="version", version=f"{settings.APP_NAME} {settings.APP_VERSION}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    # 添加子命令
    codebook.register(subparsers)
    simulation.register(subparsers)
    training.register(subparsers)
    evaluation.register(subparsers)
    return parser


@error_handler
def dispatch(args: argparse.Namespace) -> int:
    return args.handler(args)


def main(argv: Optional[List[str]] = None) -> int:
    logging.config.dictConfig(settings.get_log_config())
    args = build_parser().parse_args(argv)
    return dispatch(args)


if __name__ == "__main__":
    sys.exit(main())
