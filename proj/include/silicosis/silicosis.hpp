#ifndef SILICOSIS_SILICOSIS_HPP
#define SILICOSIS_SILICOSIS_HPP

#include "silicosis/analysis.hpp"
#include "silicosis/augmented.hpp"
#include "silicosis/errors.hpp"
#include "silicosis/integrator.hpp"
#include "silicosis/model.hpp"
#include "silicosis/moments.hpp"
#include "silicosis/truncation.hpp"

#endif  // SILICOSIS_SILICOSIS_HPP
