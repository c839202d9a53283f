# app/__init__.py
APP_NAME = "otpinn"
__version__ = "1.0.0"


def create_cli():
    """Application factory: the argparse parser with every command registered"""
    from app.cli import build_parser
    return build_parser()
