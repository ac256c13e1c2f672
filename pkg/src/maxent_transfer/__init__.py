"""Head-initialization lab for transfer learning: maximum-entropy heads,
error-energy telemetry and fine-tuning experiments on small networks."""

__version__ = "0.1.0"
