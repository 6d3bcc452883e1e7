import os
import sys


def main():
    # 1. Locate the engine sources inside the installed package
    package_dir = os.path.dirname(os.path.abspath(__file__))
    src_dir = os.path.join(package_dir, "src")

    if not os.path.isdir(src_dir):
        print(f"❌ Error: Cannot find {src_dir}", file=sys.stderr)
        sys.exit(1)

    # 2. The modules import each other flat (as pytest sees them), so src goes on the path
    if src_dir not in sys.path:
        sys.path.insert(0, src_dir)

    from cli import main as cli_main

    # 3. Execute
    try:
        sys.exit(cli_main(sys.argv[1:]))
    except KeyboardInterrupt:
        print("\n👋 kalgrad: Stopped by user.", file=sys.stderr)
        sys.exit(130)


if __name__ == "__main__":
    main()
