'''
Engine
- tensor_core: float64 tensors with channel gather/scatter
- neural: layer specs, forward/backward, SGD, local training, gradient check
'''
