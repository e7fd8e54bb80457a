#pragma once

#include "quantod/ablation.hpp"
#include "quantod/config.hpp"
#include "quantod/detector.hpp"
#include "quantod/error.hpp"
#include "quantod/feature_store.hpp"
#include "quantod/flow.hpp"
#include "quantod/metrics.hpp"
#include "quantod/parallel.hpp"
#include "quantod/quantile.hpp"
#include "quantod/rng.hpp"
#include "quantod/standardize.hpp"
#include "quantod/synthetic.hpp"
#include "quantod/trainer.hpp"
