"""Two-stage group choreography: trajectory navigation from music, then trajectory-conditioned motion diffusion."""

__version__ = "0.1.0"
