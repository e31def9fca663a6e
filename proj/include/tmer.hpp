#pragma once

#include "tmer/common.hpp"
#include "tmer/hin.hpp"
#include "tmer/embedding.hpp"
#include "tmer/checkpoint.hpp"
#include "tmer/explorer.hpp"
#include "tmer/attention.hpp"
#include "tmer/recommender.hpp"
#include "tmer/evaluation.hpp"
#include "tmer/explain.hpp"
#include "tmer/pipeline.hpp"
