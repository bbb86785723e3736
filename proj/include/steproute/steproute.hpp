#pragma once

#include "steproute/analysis.hpp"
#include "steproute/backend.hpp"
#include "steproute/config.hpp"
#include "steproute/errors.hpp"
#include "steproute/routing.hpp"
#include "steproute/segmenter.hpp"
#include "steproute/sim_generate.hpp"
#include "steproute/sim_latency.hpp"
#include "steproute/sim_script.hpp"
#include "steproute/trace_io.hpp"
#include "steproute/uncertainty.hpp"
