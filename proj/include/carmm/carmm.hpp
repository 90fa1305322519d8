#pragma once

#include "carmm/error.hpp"
#include "carmm/spatial_graph.hpp"
#include "carmm/car_prior.hpp"
#include "carmm/membership.hpp"
#include "carmm/model.hpp"
#include "carmm/sampler.hpp"
#include "carmm/diagnostics.hpp"
#include "carmm/scoring.hpp"
#include "carmm/sbc.hpp"
