#!/usr/bin/env python3
"""
Installation and Configuration Check for the Demonstration Engine
Checks source syntax, YAML configs, chain/limits schemas and dependencies
"""

import os
import sys
from pathlib import Path

import yaml

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))

# Colors for output
GREEN = '\033[92m'
YELLOW = '\033[93m'
RED = '\033[91m'
BLUE = '\033[94m'
RESET = '\033[0m'


def print_header(title):
    print(f"\n{BLUE}{'='*60}{RESET}")
    print(f"{BLUE}{title}{RESET}")
    print(f"{BLUE}{'='*60}{RESET}")


def check_python_syntax(root: Path = ROOT):
    """Check all Python files for syntax errors"""
    print_header("PYTHON SYNTAX CHECK")

    errors = []
    for dirpath, dirs, files in os.walk(root):
        dirs[:] = [d for d in dirs if not d.startswith('.') and d != 'examples']
        for file in sorted(files):
            if not file.endswith('.py'):
                continue
            path = os.path.join(dirpath, file)
            try:
                with open(path, 'r') as f:
                    compile(f.read(), path, 'exec')
                print(f"{GREEN}✅{RESET} {os.path.relpath(path, root)}")
            except SyntaxError as e:
                errors.append(f"{path}: {e}")
                print(f"{RED}❌{RESET} {path}: {e}")

    return len(errors) == 0


def check_yaml_files(root: Path = ROOT):
    """Check config.yaml and configs/*.yaml for syntax errors"""
    print_header("YAML SYNTAX CHECK")

    yaml_files = [root / 'config.yaml'] + sorted((root / 'configs').glob('*.yaml'))
    errors = []
    for file in yaml_files:
        if not file.exists():
            print(f"{YELLOW}⚠️{RESET}  {file.name} not found")
            continue
        try:
            with open(file, 'r') as f:
                yaml.safe_load(f)
            print(f"{GREEN}✅{RESET} {file.relative_to(root)} is valid")
        except yaml.YAMLError as e:
            errors.append(f"{file}: {e}")
            print(f"{RED}❌{RESET} {file.relative_to(root)}: {e}")

    return len(errors) == 0


def check_settings():
    """Sanity of the tracking and IK settings"""
    print_header("SETTINGS CHECK")
    from config_loader import config

    issues = []
    for key in ('tracking.gate_radius_m', 'tracking.pair_gate_m', 'transfer.rate_hz',
                'feasibility.ik.position_tolerance', 'feasibility.ik.orientation_tolerance'):
        value = config.get(key)
        if not isinstance(value, (int, float)) or value <= 0:
            issues.append(key)
            print(f"{RED}❌{RESET} {key} must be a positive number, got {value!r}")
        else:
            print(f"{GREEN}✅{RESET} {key} = {value}")

    if config.get('logging.format') not in ('text', 'json'):
        issues.append('logging.format')
        print(f"{RED}❌{RESET} logging.format must be 'text' or 'json'")

    return len(issues) == 0


def check_robot_configs():
    """Validate the chain and limits files named in config.yaml"""
    print_header("ROBOT CONFIGURATION CHECK")
    from config_loader import config
    from errors import ConfigError
    from feasibility import load_chains, load_limits

    ok = True
    chain_file = config.resolve_path(config.get('feasibility.chain_file'))
    try:
        chains = load_chains(chain_file)
        reach = chains['right'].reach
        print(f"{GREEN}✅{RESET} {chain_file.name}: 7 joints, reach bound {reach:.3f} m")
    except ConfigError as e:
        ok = False
        print(f"{RED}❌{RESET} {e}")

    limits_file = config.resolve_path(config.get('feasibility.limits_file'))
    try:
        limits = load_limits(limits_file)
        v = limits.velocity
        print(f"{GREEN}✅{RESET} {limits_file.name}: joint {v.joint_max} deg/s, "
              f"TCP {v.tcp_max} mm/s, gap {v.max_gap} s")
    except ConfigError as e:
        ok = False
        print(f"{RED}❌{RESET} {e}")

    return ok


def check_dependencies():
    """Check if required Python packages are installed"""
    print_header("DEPENDENCIES CHECK")

    required = {
        'numpy': '1.26.3',
        'scipy': '1.11.4',
        'pandas': '2.1.4',
        'pydantic': '2.5.3',
        'yaml': '6.0.1',
        'dotenv': '1.0.0',
        'pythonjsonlogger': '2.0.7',
    }

    package_names = {
        'yaml': 'pyyaml',
        'dotenv': 'python-dotenv',
        'pythonjsonlogger': 'python-json-logger',
    }

    missing = []
    for module, version in required.items():
        package_name = package_names.get(module, module)
        try:
            __import__(module)
            print(f"{GREEN}✅{RESET} {package_name} installed")
        except ImportError:
            missing.append(package_name)
            print(f"{RED}❌{RESET} {package_name} not installed (required: {version})")

    if missing:
        print(f"\n{YELLOW}Install missing packages:{RESET}")
        print(f"pip3 install {' '.join(missing)}")

    return len(missing) == 0


def check_environment(root: Path = ROOT):
    """Check environment configuration"""
    print_header("ENVIRONMENT CHECK")

    if (root / '.env').exists():
        print(f"{GREEN}✅{RESET} .env file exists")
    else:
        print(f"{YELLOW}⚠️{RESET}  .env file not found (defaults from config.yaml apply)")

    for name in ('DEMO_CONFIG_FILE', 'DEMO_CHAIN_FILE', 'DEMO_LIMITS_FILE'):
        value = os.getenv(name)
        if value and not Path(value).exists():
            print(f"{RED}❌{RESET} {name} points to missing file {value}")
            return False
    return True


def main():
    """Run all checks"""
    print(f"\n{BLUE}{'='*60}{RESET}")
    print(f"{BLUE}DEMONSTRATION ENGINE - ERROR CHECK{RESET}")
    print(f"{BLUE}{'='*60}{RESET}")

    all_checks = [
        ("Python Syntax", check_python_syntax),
        ("YAML Files", check_yaml_files),
        ("Dependencies", check_dependencies),
        ("Settings", check_settings),
        ("Robot Configs", check_robot_configs),
        ("Environment", check_environment),
    ]

    results = {}
    for name, check_func in all_checks:
        try:
            results[name] = check_func()
        except Exception as e:
            print(f"{RED}Error in {name}: {e}{RESET}")
            results[name] = False

    # Summary
    print_header("SUMMARY")

    passed = sum(1 for v in results.values() if v)
    total = len(results)

    for name, result in results.items():
        status = f"{GREEN}✅ PASS{RESET}" if result else f"{RED}❌ FAIL{RESET}"
        print(f"{name:20} {status}")

    print(f"\n{BLUE}{'='*60}{RESET}")
    if passed == total:
        print(f"{GREEN}✅ ALL CHECKS PASSED ({passed}/{total}){RESET}")
    else:
        print(f"{YELLOW}⚠️  SOME CHECKS FAILED ({passed}/{total}){RESET}")
        print("Please fix the issues above before recording or validating data.")
    print(f"{BLUE}{'='*60}{RESET}\n")

    return 0 if passed == total else 1


if __name__ == "__main__":
    sys.exit(main())
