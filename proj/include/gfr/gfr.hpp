#pragma once

// Umbrella header.

#include "gfr/analysis.hpp"
#include "gfr/config.hpp"
#include "gfr/core.hpp"
#include "gfr/data.hpp"
#include "gfr/error.hpp"
#include "gfr/eval.hpp"
#include "gfr/generator.hpp"
#include "gfr/model.hpp"
#include "gfr/nn.hpp"
#include "gfr/plot.hpp"
#include "gfr/trainer.hpp"
