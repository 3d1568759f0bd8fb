'''
ETL
- dataset: in-memory labelled image dataset
- mnist: IDX reader/writer and normalized MNIST loading
- synthetic: Gaussian-cluster classes for runs without MNIST on disk
- sharding: iid / noniid-L client partitions and dataset subsets
'''
