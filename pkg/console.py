"""
Console output in the pipeline's usual register: banners, numbered steps,
check-mark status lines. Only the CLI prints; library code never calls these.
"""
import sys

WIDTH = 70


def banner(title):
    print("=" * WIDTH)
    print(title.upper())
    print("=" * WIDTH)


def step(number, text, total=None):
    label = f"{number}/{total}" if total else f"{number}"
    print(f"\n[STEP {label}] {text}")


def rule():
    print("-" * WIDTH)


def ok(text):
    print(f"✓ {text}")


def warn(text):
    print(f"⚠ {text}")


def fail(text):
    print(f"✗ {text}", file=sys.stderr)


def error(category, message):
    print(f"ERROR [{category}]: {message}", file=sys.stderr)


def closing(title, files=(), next_steps=()):
    print("\n" + "=" * WIDTH)
    print(title.upper())
    print("=" * WIDTH)
    if files:
        print("\nFiles created:")
        for path in files:
            print(f"  - {path}")
    if next_steps:
        print("\nNext steps:")
        for i, text in enumerate(next_steps, 1):
            print(f"  {i}. {text}")
    print("=" * WIDTH)
