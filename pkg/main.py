import sys

from spacetime_collapse.cli import main as cli_main

def main():
    """Entry point for the spacetime-collapse package"""
    return cli_main()

if __name__ == "__main__":
    sys.exit(main())
