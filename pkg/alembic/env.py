from logging.config import fileConfig

from alembic import context

import database
import models  # noqa: F401  registers the tables on Base.metadata

config = context.config

if config.config_file_name is not None:
    fileConfig(config.config_file_name)

target_metadata = database.Base.metadata


def database_url() -> str:
    if context.get_x_argument(as_dictionary=True).get("use_ini_url") == "true":
        return config.get_main_option("sqlalchemy.url")
    return database.SQLALCHEMY_DATABASE_URL


def run_migrations_offline() -> None:
    """Emits the migration SQL without connecting to the registry."""
    context.configure(
        url=database_url(),
        target_metadata=target_metadata,
        literal_binds=True,
        dialect_opts={"paramstyle": "named"},
        render_as_batch=True,
    )

    with context.begin_transaction():
        context.run_migrations()


def run_migrations_online() -> None:
    """Applies the migrations to the registry database."""
    connectable = database.make_engine(database_url())

    with connectable.connect() as connection:
        context.configure(connection=connection, target_metadata=target_metadata, render_as_batch=True)

        with context.begin_transaction():
            context.run_migrations()


if context.is_offline_mode():
    run_migrations_offline()
else:
    run_migrations_online()
