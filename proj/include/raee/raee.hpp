#pragma once

#include "raee/collector.hpp"
#include "raee/embedding.hpp"
#include "raee/error.hpp"
#include "raee/exitdb.hpp"
#include "raee/harness.hpp"
#include "raee/knn_index.hpp"
#include "raee/policy.hpp"
#include "raee/sim_backbone.hpp"
