#pragma once

#include "amgru/error.hpp"
#include "amgru/memory.hpp"
#include "amgru/tensor.hpp"
#include "amgru/random.hpp"
#include "amgru/market_model.hpp"
#include "amgru/autodiff.hpp"
#include "amgru/rnn_nets.hpp"
#include "amgru/bsde_targets.hpp"
#include "amgru/training.hpp"
#include "amgru/evaluation.hpp"
#include "amgru/baselines.hpp"
#include "amgru/hedging.hpp"
#include "amgru/config.hpp"
#include "amgru/cli.hpp"
