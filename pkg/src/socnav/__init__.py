"""Social-navigation planning workbench.

Legible/proactive trajectory planning via alternating best responses, a
multi-agent MPC simulator with baseline controllers, benchmark metrics, and
a realtime human-in-the-loop service.
"""

__version__ = "0.1.0"
