# Import all models here so that create_all sees them
from moekit.db.session import Base  # noqa
from moekit.models.run import RunRecord  # noqa
