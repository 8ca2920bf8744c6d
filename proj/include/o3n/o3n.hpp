#pragma once

#include "o3n/tensor.hpp"
#include "o3n/autodiff.hpp"
#include "o3n/sparse_map.hpp"
#include "o3n/geometry.hpp"
#include "o3n/psm.hpp"
#include "o3n/oca.hpp"
#include "o3n/nma.hpp"
#include "o3n/synth.hpp"
#include "o3n/model.hpp"
#include "o3n/metrics.hpp"
#include "o3n/experiment.hpp"
