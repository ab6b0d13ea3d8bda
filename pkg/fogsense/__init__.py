"""
FogSense

Freezing-of-Gait detection from body-worn accelerometers under a
microcontroller memory budget: DAPHNet ingest, window features, ProtoNN and
tree classifiers, a cross-validated experiment harness and a streaming
simulator.
"""

__version__ = "0.1.0"
