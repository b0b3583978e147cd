#!/usr/bin/env python3
"""
advids 命令行主程序
"""

import sys

from advids.cli import main as cli_main


def main():
    """主函数"""
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
