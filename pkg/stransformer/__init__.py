# stransformer: multivariate forecasting with STCN and sequence-guided mask attention
