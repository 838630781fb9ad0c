#pragma once

#include "msflow/checkpoint.hpp"
#include "msflow/config.hpp"
#include "msflow/coupling.hpp"
#include "msflow/dataset.hpp"
#include "msflow/error.hpp"
#include "msflow/fusion.hpp"
#include "msflow/kernels.hpp"
#include "msflow/metrics.hpp"
#include "msflow/model.hpp"
#include "msflow/optim.hpp"
#include "msflow/pipeline.hpp"
#include "msflow/pyramid.hpp"
#include "msflow/scoring.hpp"
#include "msflow/tensor.hpp"
#include "msflow/tensor_io.hpp"
#include "msflow/trainer.hpp"
