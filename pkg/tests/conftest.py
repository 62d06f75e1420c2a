def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "acceptance: end-to-end criteria with their own runtime budgets",
    )
