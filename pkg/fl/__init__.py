'''
Federated learning
- partition: ratios, block grids and per-round sub-model specs
- aggregate: overlay averaging and block weighted broadcast
- coverage: primary/touched parameter masks and traversal predictions
- federation: client sampling, size assignment and the round loop
'''
