"""Portfolio choice under mutually exciting jump-diffusions."""
__version__ = "0.1.0"
