# utils/__init__.py
# (empty is fine, but keeping this file makes utils a package)
