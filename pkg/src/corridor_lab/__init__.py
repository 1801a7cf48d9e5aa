"""Scene adaptation for heatmap trajectory predictors through rank-1 input prompts."""

__version__ = "0.1.0"
