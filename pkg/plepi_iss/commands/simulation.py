import argparse

from plepi_iss.commands.options import add_run_arguments, run_config
from plepi_iss.middleware.middleware import command_logging
from plepi_iss.services.pipeline_service import pipeline_service


@command_logging("simulate")
def simulate(args: argparse.Namespace) -> int:
    """
    生成合成孔板：清单、图块与参考丰度
    """
    cfg = run_config(args)
    well = pipeline_service.simulate(cfg)
    print(f"{cfg.out_dir}: {well.n_fields} fields, {len(well.cells)} cells, {len(well.spots)} spots")
    return 0


@command_logging("annotate")
def annotate(args: argparse.Namespace) -> int:
    """
    按质量等级提取带噪点标注
    """
    cfg = run_config(args)
    dets = pipeline_service.annotate(cfg)
    print(f"{cfg.out_dir}: {len(dets)} detections ({cfg.quality})")
    return 0


def register(subparsers) -> None:
    add_run_arguments(subparsers.add_parser("simulate", help="生成合成孔板")).set_defaults(handler=simulate)
    add_run_arguments(subparsers.add_parser("annotate", help="提取带噪标注")).set_defaults(handler=annotate)
