from .bundle import DumpBundle, RenderError
from .render import render_attention, render_curves, render_landmarks

__all__ = ["DumpBundle", "RenderError", "render_attention",
           "render_curves", "render_landmarks"]
