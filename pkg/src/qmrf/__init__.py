"""qmrf: integer neural-network training emulator and FPGA cost model
for MRF T1/T2 map regression.

Modules:
  quantization  symmetric integer quantization and requantization
  network       architecture description and forward execution
  model_io      model container serialization
  training      MSE loss, backpropagation, SGD, QAT loop, integer export
  hardware      cycle scheduling, training-time and resource estimation
  mrf           surrogate signal generator, dataset files, error metrics
  cli           command-line workflows (generate / train / eval / verify / estimate)
"""

__version__ = "0.1.0"
