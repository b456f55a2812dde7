#pragma once

// Umbrella header for the whole engine.

#include "autograd.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "corpus.hpp"
#include "detector.hpp"
#include "eval.hpp"
#include "experiment.hpp"
#include "immunizer.hpp"
#include "model.hpp"
#include "numerics.hpp"
#include "pipeline.hpp"
#include "tensor.hpp"
#include "training.hpp"
#include "types.hpp"
