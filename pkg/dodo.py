"""Task list for doit, used to build the project; run with `doit` or `doit list` to see commands"""


def task_update_readme():
    """Update README with CLI output and the budget table"""
    return {"actions": ["cog -r README.md"]}


def task_test():
    """Run fast tests"""
    return {"actions": ["pytest -v tests/"]}


def task_test_slow():
    """Run every test, including the fine-tuned miniature model and the end-to-end toy run"""
    return {"actions": ["FVWORKBENCH_SLOW=1 pytest -v tests/"]}


def task_update_goldens():
    """Rewrite the committed golden tables and scores in tests/goldens from the current code"""
    return {
        "actions": [
            "FVWORKBENCH_UPDATE_GOLDENS=1 pytest -v tests/test_analyst.py tests/test_model_gateway.py -k golden"
        ]
    }


def task_toy_run():
    """Run the end-to-end toy pipeline"""
    return {"actions": ["fvworkbench run --config configs/toy.toml"]}


def task_docs():
    """Build docs"""
    return {"actions": ["mkdocs build"]}


def task_gh_docs():
    """Build docs and push to gh-pages"""
    return {
        "actions": [
            "mkdocs gh-deploy --force",
        ]
    }


def task_clean_build_files():
    """Clean out old build files"""
    return {
        "actions": ["rm -rf dist/", "rm -rf build/"],
    }


def task_build():
    """Build python project"""
    return {"actions": ["python3 -m build"]}
