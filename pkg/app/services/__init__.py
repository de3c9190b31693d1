"""Decoding services

Policies, rewards, values and the decoders built on them, shared by the CLI command
handlers and the stub policy server.
"""
