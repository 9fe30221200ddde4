#pragma once

#include "staflow/checkpoint.hpp"
#include "staflow/config_json.hpp"
#include "staflow/csv_io.hpp"
#include "staflow/eeg.hpp"
#include "staflow/filter.hpp"
#include "staflow/metrics.hpp"
#include "staflow/model.hpp"
#include "staflow/nn.hpp"
#include "staflow/synth.hpp"
#include "staflow/tensor.hpp"
#include "staflow/train.hpp"
