#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: __init__.py
# ==================================

__version__ = '0.1.0'

from aircast.Synthetic import SynthConfig, synth_generate
from aircast.Dataset import CityDataset, PreparedCity, build_windows, read_dataset, write_dataset
from aircast.Forecaster import AirModel, ModelConfig, ForecastBundle, hourly_forecast, rollout
from aircast.Trainer import TrainConfig, quantile_loss, train_6h, train_interp, verify_gradients
from aircast.metrics import compute_metrics
from aircast.Evaluation import AblationSpec, MetricsReport, run_ablation, window_report
