#pragma once

#include "kdcode/numerics.hpp"
#include "kdcode/codec.hpp"
#include "kdcode/composer.hpp"
#include "kdcode/model.hpp"
#include "kdcode/trainer.hpp"
#include "kdcode/eval.hpp"
#include "kdcode/data.hpp"
