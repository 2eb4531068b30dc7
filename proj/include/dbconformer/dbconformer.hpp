#pragma once

#include "dbconformer/align.hpp"
#include "dbconformer/checkpoint.hpp"
#include "dbconformer/config.hpp"
#include "dbconformer/error.hpp"
#include "dbconformer/gradcheck.hpp"
#include "dbconformer/harness.hpp"
#include "dbconformer/metrics.hpp"
#include "dbconformer/model.hpp"
#include "dbconformer/optim.hpp"
#include "dbconformer/rng.hpp"
#include "dbconformer/run_config.hpp"
#include "dbconformer/runtime.hpp"
#include "dbconformer/splits.hpp"
#include "dbconformer/synthetic.hpp"
#include "dbconformer/tensor.hpp"
#include "dbconformer/trialset.hpp"
