"""
Command-line front end and validation suites
"""
