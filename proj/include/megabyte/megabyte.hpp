#pragma once

#include "megabyte/checkpoint.hpp"
#include "megabyte/config.hpp"
#include "megabyte/core.hpp"
#include "megabyte/costmodel.hpp"
#include "megabyte/data.hpp"
#include "megabyte/inference.hpp"
#include "megabyte/model.hpp"
#include "megabyte/ops.hpp"
#include "megabyte/parallel.hpp"
#include "megabyte/params.hpp"
#include "megabyte/rng.hpp"
#include "megabyte/run_config.hpp"
#include "megabyte/tensor.hpp"
#include "megabyte/training.hpp"
