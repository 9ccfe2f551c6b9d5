#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: constants.py
# ==================================
"""Fixed names, units and defaults shared by the whole package."""

PI = 3.141592653589793238462643383279502884
DEG2RAD = PI/180.

# The pollutant axis order is fixed everywhere
POLLUTANTS = ('SO2', 'NO2', 'CO', 'O3', 'PM2.5', 'PM10')
POLLUTANT_KEYS = ('so2', 'no2', 'co', 'o3', 'pm25', 'pm10')  # station CSV column names
N_POLLUTANTS = len(POLLUTANTS)

# 7 surface + (U, V, T, SH) x 3 pressure levels
SURFACE_MET = ('T2M', 'D2M', 'U10M', 'V10M', 'V100M', 'U100M', 'TP')
PRESSURE_LEVELS = (1000, 925, 850)
PRESSURE_MET = ('U', 'V', 'T', 'SH')
MET_CHANNELS = SURFACE_MET + tuple(f'{v}{p}' for p in PRESSURE_LEVELS for v in PRESSURE_MET)
EMS_CHANNELS = ('NOx', 'CO', 'NH3', 'PM10', 'PM2.5', 'SO2', 'VOCs')

# emission channel that drives each pollutant in the synthetic generator
EMS_SOURCE = {'SO2': 'SO2', 'NO2': 'NOx', 'CO': 'CO', 'O3': 'VOCs', 'PM2.5': 'PM2.5', 'PM10': 'PM10'}

QUANTILES = (0.1, 0.5, 0.9)
STEP_HOURS = 6
HORIZON_STEPS = 12
HORIZON_HOURS = STEP_HOURS*HORIZON_STEPS  # 72
N_INTERP = STEP_HOURS-1  # intermediate hours between two 6-h frames
MAX_GAP_HOURS = 3

LEAD_WINDOWS = {'1-24h': (1, 24), '25-48h': (25, 48), '49-72h': (49, 72)}
METRICS = ('R', 'RMSE', 'rRMSE', 'MRE', 'MAE')

INIT_HOURS = (0, 12)  # UTC hours of forecast initializations

ABLATION_ARMS = ('ALL', 'DEMET', 'DEEMS', 'STN_ONLY')

# (n_stations, centre lat, centre lon)
CITY_PRESETS = {'beijing': (11, 39.90, 116.40),
                'shanghai': (19, 31.23, 121.47),
                'shenzhen': (11, 22.54, 114.06),
                }

DAY_HOURS = 24
YEAR_DAYS = 365.25
