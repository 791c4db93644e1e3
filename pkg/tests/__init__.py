# seqplace test suite
