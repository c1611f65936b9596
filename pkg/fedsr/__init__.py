# CF-FedSR federated sequential recommendation simulator
