"""Mixed human/robot traffic simulation with intersection control,
privacy-bounded crowdsensing, flow forecasting and RV rebalancing."""

__version__ = "0.1.0"
