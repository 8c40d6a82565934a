"""Neural-process meta-learning lab: NP/ANP/FELD models and the two-stage
clustered training pipeline, verifiable at desk scale on synthetic tasks."""

__version__ = "0.1.0"
